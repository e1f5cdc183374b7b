//! Feed-forward shortcut heads: multinomial logistic regression over
//! pooled features for the class label and for a discretized pose grid,
//! with temperature scaling fitted on a held-out split so the confidence
//! threshold in the cascade is meaningful.

use ndarray::Array2;

use crate::camera::Pose;
use crate::error::{Error, Result};
use crate::likelihood::FeatureMap;
use crate::scalar::{real, Real};
use crate::training::{FeatureExtractor, TrainSet};

/// Trained heads plus the pose-bin geometry they predict over.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardHeads<S: Real = f64> {
    /// Y x c over globally average-pooled features.
    pub class_weight: Array2<S>,
    pub class_bias: Vec<S>,
    pub class_temperature: S,
    /// B x (gh*gw*c) over a coarse spatially pooled grid.
    pub pose_weight: Array2<S>,
    pub pose_bias: Vec<S>,
    pub pose_temperature: S,
    /// Spatial pooling grid feeding the pose head.
    pub pose_pool: (usize, usize),
    /// (n_azimuth, n_elevation, n_theta) bins.
    pub grid: (usize, usize, usize),
    pub elevation_band: (f64, f64),
    pub theta_band: (f64, f64),
    /// Nominal camera distance for bin-centre poses.
    pub distance: f64,
}

/// Training settings for the heads.
#[derive(Debug, Clone)]
pub struct HeadsConfig {
    pub grid: (usize, usize, usize),
    pub elevation_band: (f64, f64),
    pub theta_band: (f64, f64),
    pub distance: f64,
    pub pose_pool: (usize, usize),
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Every k-th sample goes to the calibration split.
    pub holdout_every: usize,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        HeadsConfig {
            grid: (12, 4, 3),
            elevation_band: crate::camera::DEFAULT_ELEVATION_BAND,
            theta_band: crate::camera::DEFAULT_THETA_BAND,
            distance: 5.0,
            pose_pool: (2, 2),
            epochs: 400,
            learning_rate: 0.5,
            weight_decay: 1e-3,
            holdout_every: 5,
        }
    }
}

impl<S: Real> FeedForwardHeads<S> {
    pub fn pose_bin_count(&self) -> usize {
        self.grid.0 * self.grid.1 * self.grid.2
    }

    /// All-zero heads over `classes` labels (uniform predictions).
    pub fn zeros(classes: usize, feature_dim: usize, cfg: &HeadsConfig) -> Self {
        let bins = cfg.grid.0 * cfg.grid.1 * cfg.grid.2;
        let d = cfg.pose_pool.0 * cfg.pose_pool.1 * feature_dim;
        FeedForwardHeads {
            class_weight: Array2::zeros((classes, feature_dim)),
            class_bias: vec![S::zero(); classes],
            class_temperature: S::one(),
            pose_weight: Array2::zeros((bins, d)),
            pose_bias: vec![S::zero(); bins],
            pose_temperature: S::one(),
            pose_pool: cfg.pose_pool,
            grid: cfg.grid,
            elevation_band: cfg.elevation_band,
            theta_band: cfg.theta_band,
            distance: cfg.distance,
        }
    }

    /// Calibrated class probabilities for a feature map.
    pub fn predict_class_probs(&self, map: &FeatureMap<S>) -> Vec<S> {
        let x = global_mean_pool(map);
        let logits = affine(&self.class_weight, &self.class_bias, &x);
        softmax_with_temperature(&logits, self.class_temperature)
    }

    /// Calibrated pose-bin probabilities for a feature map.
    pub fn predict_pose_probs(&self, map: &FeatureMap<S>) -> Vec<S> {
        let x = spatial_mean_pool(map, self.pose_pool);
        let logits = affine(&self.pose_weight, &self.pose_bias, &x);
        softmax_with_temperature(&logits, self.pose_temperature)
    }

    /// Centre pose of a bin, using the nominal distance.
    pub fn pose_bin_center(&self, bin: usize) -> Result<Pose<S>> {
        let (na, ne, nt) = self.grid;
        if bin >= na * ne * nt {
            return Err(Error::invalid_argument(format!("pose bin {bin} out of range")));
        }
        let t = bin % nt;
        let e = (bin / nt) % ne;
        let a = bin / (nt * ne);
        let az = std::f64::consts::TAU * a as f64 / na as f64;
        let el = band_point(self.elevation_band, ne, e);
        let th = band_point(self.theta_band, nt, t);
        Pose::new(
            real(az),
            real(el),
            real(th),
            real(self.distance),
        )
    }

    /// Bin index whose centre is nearest to `pose` (azimuth circular).
    pub fn pose_to_bin(&self, pose: &Pose<S>) -> usize {
        let (na, ne, nt) = self.grid;
        let az = pose.azimuth.to_f64().unwrap();
        let step = std::f64::consts::TAU / na as f64;
        let a = (az / step).round() as usize % na;
        let e = nearest_band_index(self.elevation_band, ne, pose.elevation.to_f64().unwrap());
        let t = nearest_band_index(self.theta_band, nt, pose.theta.to_f64().unwrap());
        (a * ne + e) * nt + t
    }

    pub fn quantize_f32(&mut self) {
        self.class_weight.mapv_inplace(Real::snap_f32);
        for b in &mut self.class_bias {
            *b = b.snap_f32();
        }
        self.class_temperature = self.class_temperature.snap_f32();
        self.pose_weight.mapv_inplace(Real::snap_f32);
        for b in &mut self.pose_bias {
            *b = b.snap_f32();
        }
        self.pose_temperature = self.pose_temperature.snap_f32();
    }
}

fn band_point(band: (f64, f64), n: usize, i: usize) -> f64 {
    if n == 1 {
        (band.0 + band.1) / 2.0
    } else {
        band.0 + (band.1 - band.0) * i as f64 / (n - 1) as f64
    }
}

fn nearest_band_index(band: (f64, f64), n: usize, x: f64) -> usize {
    if n == 1 {
        return 0;
    }
    let step = (band.1 - band.0) / (n - 1) as f64;
    (((x - band.0) / step).round() as i64).clamp(0, n as i64 - 1) as usize
}

/// Global mean over the lattice (c values).
pub fn global_mean_pool<S: Real>(map: &FeatureMap<S>) -> Vec<S> {
    let (h, w, c) = map.dims();
    let mut out = vec![S::zero(); c];
    let data = map.as_slice();
    for cell in 0..h * w {
        for k in 0..c {
            out[k] = out[k] + data[cell * c + k];
        }
    }
    let inv = S::one() / real::<S>((h * w) as f64);
    for v in &mut out {
        *v = *v * inv;
    }
    out
}

/// Mean over a gh x gw block partition of the lattice (gh*gw*c values).
pub fn spatial_mean_pool<S: Real>(map: &FeatureMap<S>, pool: (usize, usize)) -> Vec<S> {
    let (h, w, c) = map.dims();
    let (gh, gw) = pool;
    let mut out = vec![S::zero(); gh * gw * c];
    let mut counts = vec![0usize; gh * gw];
    for row in 0..h {
        for col in 0..w {
            let by = (row * gh / h).min(gh - 1);
            let bx = (col * gw / w).min(gw - 1);
            let b = by * gw + bx;
            counts[b] += 1;
            for k in 0..c {
                out[b * c + k] = out[b * c + k] + map.pixel(row, col)[k];
            }
        }
    }
    for b in 0..gh * gw {
        if counts[b] > 0 {
            let inv = S::one() / real::<S>(counts[b] as f64);
            for k in 0..c {
                out[b * c + k] = out[b * c + k] * inv;
            }
        }
    }
    out
}

fn affine<S: Real>(weight: &Array2<S>, bias: &[S], x: &[S]) -> Vec<S> {
    let mut out = bias.to_vec();
    for (o, row) in weight.rows().into_iter().enumerate() {
        let mut acc = out[o];
        for (w, v) in row.iter().zip(x.iter()) {
            acc = acc + *w * *v;
        }
        out[o] = acc;
    }
    out
}

fn softmax_with_temperature<S: Real>(logits: &[S], temperature: S) -> Vec<S> {
    let mut max = S::neg_infinity();
    for &l in logits {
        if l > max {
            max = l;
        }
    }
    let mut out: Vec<S> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let total: S = out.iter().copied().sum();
    for v in &mut out {
        *v = *v / total;
    }
    out
}

/// Train both heads on extracted features with annotated classes and poses,
/// then fit the softmax temperatures on a held-out split.
pub fn train_heads<S: Real>(
    dataset: &TrainSet<S>,
    extractor: &FeatureExtractor<S>,
    classes: usize,
    cfg: &HeadsConfig,
) -> Result<FeedForwardHeads<S>> {
    if dataset.samples.is_empty() {
        return Err(Error::invalid_dataset("empty dataset"));
    }
    let seen: std::collections::BTreeSet<usize> =
        dataset.samples.iter().map(|s| s.class_id).collect();
    if seen.len() < 2 {
        return Err(Error::invalid_dataset(
            "head training needs at least two classes",
        ));
    }

    let mut heads = FeedForwardHeads::zeros(classes, extractor.out_dim(), cfg);

    // Feature extraction once up front.
    let mut class_x = Vec::with_capacity(dataset.samples.len());
    let mut pose_x = Vec::with_capacity(dataset.samples.len());
    let mut class_y = Vec::with_capacity(dataset.samples.len());
    let mut pose_y = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let map = extractor.extract(&s.image)?;
        class_x.push(global_mean_pool(&map));
        pose_x.push(spatial_mean_pool(&map, cfg.pose_pool));
        class_y.push(s.class_id);
        pose_y.push(heads.pose_to_bin(&s.pose));
    }

    let holdout: Vec<bool> = (0..dataset.samples.len())
        .map(|i| cfg.holdout_every > 0 && i % cfg.holdout_every == 0)
        .collect();

    fit_softmax_regression(
        &mut heads.class_weight,
        &mut heads.class_bias,
        &class_x,
        &class_y,
        &holdout,
        cfg,
    );
    fit_softmax_regression(
        &mut heads.pose_weight,
        &mut heads.pose_bias,
        &pose_x,
        &pose_y,
        &holdout,
        cfg,
    );

    heads.class_temperature = fit_temperature(
        &heads.class_weight,
        &heads.class_bias,
        &class_x,
        &class_y,
        &holdout,
    );
    heads.pose_temperature = fit_temperature(
        &heads.pose_weight,
        &heads.pose_bias,
        &pose_x,
        &pose_y,
        &holdout,
    );

    heads.quantize_f32();
    Ok(heads)
}

/// Full-batch gradient descent on the multinomial cross-entropy of the
/// non-holdout samples.
fn fit_softmax_regression<S: Real>(
    weight: &mut Array2<S>,
    bias: &mut Vec<S>,
    xs: &[Vec<S>],
    ys: &[usize],
    holdout: &[bool],
    cfg: &HeadsConfig,
) {
    let classes = weight.nrows();
    let dim = weight.ncols();
    let train_idx: Vec<usize> = (0..xs.len()).filter(|&i| !holdout[i]).collect();
    if train_idx.is_empty() {
        return;
    }
    let inv_n = real::<S>(1.0 / train_idx.len() as f64);
    let lr = real::<S>(cfg.learning_rate);
    let decay = real::<S>(cfg.weight_decay);

    for _ in 0..cfg.epochs {
        let mut gw = Array2::<S>::zeros((classes, dim));
        let mut gb = vec![S::zero(); classes];
        for &i in &train_idx {
            let logits = affine(weight, bias, &xs[i]);
            let probs = softmax_with_temperature(&logits, S::one());
            for o in 0..classes {
                let err = probs[o] - if ys[i] == o { S::one() } else { S::zero() };
                gb[o] = gb[o] + err;
                for (gwo, xv) in gw.row_mut(o).iter_mut().zip(xs[i].iter()) {
                    *gwo = *gwo + err * *xv;
                }
            }
        }
        for (w, g) in weight.iter_mut().zip(gw.iter()) {
            *w = *w - lr * (*g * inv_n + decay * *w);
        }
        for (b, g) in bias.iter_mut().zip(gb.iter()) {
            *b = *b - lr * *g * inv_n;
        }
    }
}

/// Temperature minimizing the held-out NLL (golden-section over log T).
fn fit_temperature<S: Real>(
    weight: &Array2<S>,
    bias: &[S],
    xs: &[Vec<S>],
    ys: &[usize],
    holdout: &[bool],
) -> S {
    let idx: Vec<usize> = (0..xs.len()).filter(|&i| holdout[i]).collect();
    if idx.is_empty() {
        return S::one();
    }
    let nll = |log_t: f64| -> f64 {
        let t = real::<S>(log_t.exp());
        let mut acc = 0.0;
        for &i in &idx {
            let logits = affine(weight, bias, &xs[i]);
            let probs = softmax_with_temperature(&logits, t);
            let p = probs[ys[i]].to_f64().unwrap().max(1e-300);
            acc -= p.ln();
        }
        acc
    };
    let (mut lo, mut hi) = ((0.05f64).ln(), (20.0f64).ln());
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut m1 = hi - phi * (hi - lo);
    let mut m2 = lo + phi * (hi - lo);
    let mut f1 = nll(m1);
    let mut f2 = nll(m2);
    for _ in 0..60 {
        if f1 <= f2 {
            hi = m2;
            m2 = m1;
            f2 = f1;
            m1 = hi - phi * (hi - lo);
            f1 = nll(m1);
        } else {
            lo = m1;
            m1 = m2;
            f1 = f2;
            m2 = lo + phi * (hi - lo);
            f2 = nll(m2);
        }
    }
    real::<S>(((lo + hi) / 2.0).exp())
}
