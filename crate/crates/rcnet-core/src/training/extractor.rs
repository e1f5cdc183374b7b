//! Desk-scale feature extractor: average-pool downsampling followed by a
//! per-pixel linear map, with an optional single 3x3 convolution stage.

use ndarray::{Array2, Array3, Array4};
use rand::Rng;

use crate::error::{Error, Result};
use crate::likelihood::{FeatureMap, Provenance};
use crate::scalar::{real, Real};

/// Shared feature extractor applied to every input image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor<S: Real = f64> {
    /// c_in x c per-pixel linear map.
    pub weight: Array2<S>,
    /// c bias.
    pub bias: Vec<S>,
    /// Optional (3, 3, c, c) convolution kernel applied after the linear map.
    pub conv: Option<Array4<S>>,
    /// Downsampling factor from image to feature lattice.
    pub stride: usize,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ExtractorCache<S: Real = f64> {
    /// Pooled input, H x W x c_in.
    pub pooled: Array3<S>,
    /// Pre-convolution features when the conv stage is enabled.
    pub premap: Option<Array3<S>>,
}

/// Parameter gradients mirroring the extractor layout.
#[derive(Debug, Clone)]
pub struct ExtractorGrad<S: Real = f64> {
    pub weight: Array2<S>,
    pub bias: Vec<S>,
    pub conv: Option<Array4<S>>,
}

impl<S: Real> FeatureExtractor<S> {
    /// Identity extractor (requires c_in == c); useful as a fixed backbone.
    pub fn identity(dim: usize, stride: usize) -> Self {
        let mut weight = Array2::zeros((dim, dim));
        for i in 0..dim {
            weight[[i, i]] = S::one();
        }
        FeatureExtractor {
            weight,
            bias: vec![S::zero(); dim],
            conv: None,
            stride,
        }
    }

    /// Random initialization scaled so output magnitudes track input
    /// magnitudes.
    pub fn random(
        in_dim: usize,
        out_dim: usize,
        stride: usize,
        with_conv: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let scale = 1.0 / ((in_dim * out_dim) as f64).sqrt();
        let weight = Array2::from_shape_fn((in_dim, out_dim), |_| {
            real::<S>(rng.random_range(-1.0..1.0) * scale * 2.0)
        });
        let conv = with_conv.then(|| {
            let mut k: Array4<S> = Array4::zeros((3, 3, out_dim, out_dim));
            // Near-identity: centre tap is the identity plus noise.
            for o in 0..out_dim {
                k[[1, 1, o, o]] = S::one();
            }
            let jitter = 0.02 / out_dim as f64;
            k.mapv_inplace(|v| v + real::<S>(rng.random_range(-1.0..1.0) * jitter));
            k
        });
        FeatureExtractor {
            weight,
            bias: vec![S::zero(); out_dim],
            conv,
            stride,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    /// Feature map for an image whose sides are divisible by the stride.
    pub fn extract(&self, image: &Array3<S>) -> Result<FeatureMap<S>> {
        Ok(self.extract_with_cache(image)?.0)
    }

    pub fn extract_with_cache(&self, image: &Array3<S>) -> Result<(FeatureMap<S>, ExtractorCache<S>)> {
        let (ih, iw, ic) = image.dim();
        if ic != self.in_dim() {
            return Err(Error::invalid_argument(format!(
                "image channels {ic} != extractor input dim {}",
                self.in_dim()
            )));
        }
        if self.stride == 0 || ih % self.stride != 0 || iw % self.stride != 0 {
            return Err(Error::invalid_argument(format!(
                "image {ih}x{iw} not divisible by stride {}",
                self.stride
            )));
        }
        let pooled = average_pool(image, self.stride);
        let mapped = self.pointwise(&pooled);
        let (out, premap) = match &self.conv {
            Some(kernel) => {
                let conved = conv3x3(&mapped, kernel);
                (conved, Some(mapped))
            }
            None => (mapped, None),
        };
        let map = FeatureMap::new(out, Provenance::Extracted)?;
        Ok((map, ExtractorCache { pooled, premap }))
    }

    fn pointwise(&self, pooled: &Array3<S>) -> Array3<S> {
        let (h, w, ic) = pooled.dim();
        let oc = self.out_dim();
        let mut out = Array3::zeros((h, w, oc));
        for y in 0..h {
            for x in 0..w {
                for o in 0..oc {
                    let mut acc = self.bias[o];
                    for i in 0..ic {
                        acc = acc + pooled[[y, x, i]] * self.weight[[i, o]];
                    }
                    out[[y, x, o]] = acc;
                }
            }
        }
        out
    }

    /// Accumulate parameter gradients for a loss gradient `d_map` over the
    /// output feature map.
    pub fn backward(&self, cache: &ExtractorCache<S>, d_map: &Array3<S>) -> ExtractorGrad<S> {
        let (h, w, _) = cache.pooled.dim();
        let ic = self.in_dim();
        let oc = self.out_dim();

        let (d_premap, g_conv) = match (&self.conv, &cache.premap) {
            (Some(kernel), Some(premap)) => {
                let mut gk: Array4<S> = Array4::zeros((3, 3, oc, oc));
                let mut dp: Array3<S> = Array3::zeros((h, w, oc));
                for y in 0..h {
                    for x in 0..w {
                        for dy in 0..3usize {
                            for dx in 0..3usize {
                                let sy = y as i64 + dy as i64 - 1;
                                let sx = x as i64 + dx as i64 - 1;
                                if sy < 0 || sy >= h as i64 || sx < 0 || sx >= w as i64 {
                                    continue;
                                }
                                let (sy, sx) = (sy as usize, sx as usize);
                                for i in 0..oc {
                                    let src = premap[[sy, sx, i]];
                                    for o in 0..oc {
                                        let g = d_map[[y, x, o]];
                                        gk[[dy, dx, i, o]] = gk[[dy, dx, i, o]] + src * g;
                                        dp[[sy, sx, i]] =
                                            dp[[sy, sx, i]] + kernel[[dy, dx, i, o]] * g;
                                    }
                                }
                            }
                        }
                    }
                }
                (dp, Some(gk))
            }
            _ => (d_map.clone(), None),
        };

        let mut g_weight = Array2::zeros((ic, oc));
        let mut g_bias = vec![S::zero(); oc];
        for y in 0..h {
            for x in 0..w {
                for o in 0..oc {
                    let g = d_premap[[y, x, o]];
                    g_bias[o] = g_bias[o] + g;
                    for i in 0..ic {
                        g_weight[[i, o]] = g_weight[[i, o]] + cache.pooled[[y, x, i]] * g;
                    }
                }
            }
        }
        ExtractorGrad {
            weight: g_weight,
            bias: g_bias,
            conv: g_conv,
        }
    }

    /// Gradient-descent step with optional weight decay.
    pub fn apply_grad(&mut self, grad: &ExtractorGrad<S>, lr: S, weight_decay: S) {
        let decay = S::one() - lr * weight_decay;
        for (w, g) in self.weight.iter_mut().zip(grad.weight.iter()) {
            *w = *w * decay - lr * *g;
        }
        for (b, g) in self.bias.iter_mut().zip(grad.bias.iter()) {
            *b = *b - lr * *g;
        }
        if let (Some(k), Some(gk)) = (&mut self.conv, &grad.conv) {
            for (w, g) in k.iter_mut().zip(gk.iter()) {
                *w = *w * decay - lr * *g;
            }
        }
    }

    pub fn quantize_f32(&mut self) {
        self.weight.mapv_inplace(Real::snap_f32);
        for b in &mut self.bias {
            *b = b.snap_f32();
        }
        if let Some(k) = &mut self.conv {
            k.mapv_inplace(Real::snap_f32);
        }
    }
}

/// Block-mean downsampling by `stride` along both spatial axes.
pub fn average_pool<S: Real>(image: &Array3<S>, stride: usize) -> Array3<S> {
    let (ih, iw, c) = image.dim();
    let (h, w) = (ih / stride, iw / stride);
    let inv = S::one() / real::<S>((stride * stride) as f64);
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let mut acc = S::zero();
                for dy in 0..stride {
                    for dx in 0..stride {
                        acc = acc + image[[y * stride + dy, x * stride + dx, k]];
                    }
                }
                out[[y, x, k]] = acc * inv;
            }
        }
    }
    out
}

fn conv3x3<S: Real>(input: &Array3<S>, kernel: &Array4<S>) -> Array3<S> {
    let (h, w, c) = input.dim();
    let oc = kernel.dim().3;
    let mut out = Array3::zeros((h, w, oc));
    for y in 0..h {
        for x in 0..w {
            for o in 0..oc {
                let mut acc = S::zero();
                for dy in 0..3usize {
                    for dx in 0..3usize {
                        let sy = y as i64 + dy as i64 - 1;
                        let sx = x as i64 + dx as i64 - 1;
                        if sy < 0 || sy >= h as i64 || sx < 0 || sx >= w as i64 {
                            continue;
                        }
                        for i in 0..c {
                            acc = acc
                                + input[[sy as usize, sx as usize, i]] * kernel[[dy, dx, i, o]];
                        }
                    }
                }
                out[[y, x, o]] = acc;
            }
        }
    }
    out
}
