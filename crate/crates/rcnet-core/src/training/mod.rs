//! Joint training of the shared feature extractor and the per-class neural
//! textures: a contrastive extractor objective (spatial plus class
//! separation) alternating with moving-average maximum-likelihood texture
//! updates driven by annotated poses.

mod extractor;
mod heads;
mod losses;

pub use extractor::{average_pool, ExtractorCache, ExtractorGrad, FeatureExtractor};
pub use heads::{
    global_mean_pool, spatial_mean_pool, train_heads, FeedForwardHeads, HeadsConfig,
};
pub use losses::{class_loss, class_loss_from_means, class_loss_mean_grads, con_loss, con_loss_with_grad};

use ndarray::Array3;

use crate::camera::{project, CameraIntrinsics, Pose, ProjectedMesh};
use crate::error::{Error, Result};
use crate::likelihood::FeatureMap;
use crate::mesh::{ModelBank, NeuralMeshModel};
use crate::scalar::{real, Real};
use crate::seeds;

/// One pose-annotated training image.
#[derive(Debug, Clone)]
pub struct TrainSample<S: Real = f64> {
    pub image: Array3<S>,
    pub class_id: usize,
    pub pose: Pose<S>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainSet<S: Real = f64> {
    pub samples: Vec<TrainSample<S>>,
}

/// Knobs for [`train_bank`].
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Moving-average momentum, in (0, 1].
    pub eta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub w_con: f64,
    pub w_class: f64,
    /// Pair-sampling cap per contrastive term; `None` means exact sums.
    pub pair_cap: Option<usize>,
    pub weight_decay: f64,
    pub seed: u64,
    /// Relative tolerance on epoch-to-epoch joint-loss increases before
    /// early-stopping.
    pub increase_tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 0.5,
            learning_rate: 0.05,
            epochs: 40,
            w_con: 1.0,
            w_class: 1.0,
            pair_cap: Some(512),
            weight_decay: 1e-4,
            seed: 0,
            increase_tolerance: 0.05,
        }
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: u32,
    pub con: f64,
    pub class: f64,
    pub joint: f64,
}

/// Blend step of the moving-average update (pre-normalization).
pub fn ma_blend<S: Real>(current: &[S], target: &[S], eta: S) -> Vec<S> {
    current
        .iter()
        .zip(target.iter())
        .map(|(c, t)| (S::one() - eta) * *c + eta * *t)
        .collect()
}

/// Moving-average texture update: every vertex with assigned foreground
/// pixels moves toward the mean of its assigned features and is then
/// L2-renormalized; unassigned vertices are left untouched bit-for-bit.
pub fn update_textures_ma<S: Real>(
    model: &mut NeuralMeshModel<S>,
    map: &FeatureMap<S>,
    proj: &ProjectedMesh<S>,
    eta: S,
) -> Result<()> {
    if !(eta > S::zero() && eta <= S::one()) {
        return Err(Error::invalid_argument("eta must lie in (0, 1]"));
    }
    let (h, w, c) = map.dims();
    if proj.grid != (h, w) || model.feature_dim() != c {
        return Err(Error::invalid_argument("dimension mismatch"));
    }

    let r_count = model.vertex_count();
    let mut sums = vec![S::zero(); r_count * c];
    let mut counts = vec![0usize; r_count];
    let data = map.as_slice();
    for cell in 0..h * w {
        if !proj.fg_mask[cell] {
            continue;
        }
        let r = proj.correspondence[cell] as usize;
        counts[r] += 1;
        for k in 0..c {
            sums[r * c + k] = sums[r * c + k] + data[cell * c + k];
        }
    }

    for r in 0..r_count {
        if counts[r] == 0 {
            continue;
        }
        let inv = S::one() / real::<S>(counts[r] as f64);
        let mean: Vec<S> = (0..c).map(|k| sums[r * c + k] * inv).collect();
        let current: Vec<S> = model.texture.row(r).to_vec();
        let blended = ma_blend(&current, &mean, eta);
        let norm = blended
            .iter()
            .map(|v| *v * *v)
            .fold(S::zero(), |a, b| a + b)
            .sqrt();
        let mut row = model.texture.row_mut(r);
        if norm > real::<S>(1e-12) {
            for (dst, b) in row.iter_mut().zip(blended.iter()) {
                *dst = *b / norm;
            }
        } else {
            for (dst, b) in row.iter_mut().zip(blended.iter()) {
                *dst = *b;
            }
        }
    }
    Ok(())
}

/// Moving-average update of the background mean from off-mesh features.
pub fn update_background_ma<S: Real>(
    bg_mean: &mut [S],
    map: &FeatureMap<S>,
    fg_mask: &[bool],
    eta: S,
) {
    let (h, w, c) = map.dims();
    let data = map.as_slice();
    let mut sum = vec![S::zero(); c];
    let mut count = 0usize;
    for cell in 0..h * w {
        if fg_mask[cell] {
            continue;
        }
        count += 1;
        for k in 0..c {
            sum[k] = sum[k] + data[cell * c + k];
        }
    }
    if count == 0 {
        return;
    }
    let inv = S::one() / real::<S>(count as f64);
    for k in 0..c {
        bg_mean[k] = (S::one() - eta) * bg_mean[k] + eta * sum[k] * inv;
    }
}

/// Train the extractor and textures jointly. Returns the trained bank and
/// the per-epoch loss trace (epoch numbering continues from the bank's
/// `trained_epochs` so resumed runs line up).
pub fn train_bank<S: Real>(
    mut bank: ModelBank<S>,
    dataset: &TrainSet<S>,
    cam: &CameraIntrinsics<S>,
    cfg: &TrainConfig,
) -> Result<(ModelBank<S>, Vec<EpochLoss>)> {
    if !(cfg.eta > 0.0 && cfg.eta <= 1.0) {
        return Err(Error::invalid_argument("eta must lie in (0, 1]"));
    }
    if cfg.learning_rate <= 0.0 {
        return Err(Error::invalid_argument("learning rate must be positive"));
    }
    bank.validate()?;
    let y_count = bank.class_count();

    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); y_count];
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.class_id >= y_count {
            return Err(Error::invalid_dataset(format!(
                "sample class {} outside bank range",
                s.class_id
            )));
        }
        per_class[s.class_id].push(i);
    }
    if let Some(missing) = per_class.iter().position(|v| v.is_empty()) {
        return Err(Error::invalid_dataset(format!(
            "class {missing} has no training samples"
        )));
    }

    // Projections depend only on fixed geometry and the annotated pose.
    let projections: Vec<ProjectedMesh<S>> = dataset
        .samples
        .iter()
        .map(|s| project(&bank.models[s.class_id], &s.pose, cam))
        .collect::<Result<_>>()?;

    let eta = real::<S>(cfg.eta);
    let class_pairs = (y_count * y_count.saturating_sub(1)).max(1) as f64;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let start_epoch = bank.trained_epochs;
    let mut batch_counter = 0u64;

    for e in 0..cfg.epochs {
        let epoch_no = start_epoch + e as u32 + 1;

        // Deterministic per-epoch shuffle within each class.
        let mut order: Vec<Vec<usize>> = Vec::with_capacity(y_count);
        for (y, list) in per_class.iter().enumerate() {
            let mut l = list.clone();
            let mut rng = seeds::rng(cfg.seed, "order", u64::from(epoch_no) << 8 | y as u64);
            shuffle(&mut l, &mut rng);
            order.push(l);
        }
        let batches = order.iter().map(Vec::len).max().unwrap_or(0);

        for b in 0..batches {
            let batch: Vec<usize> = (0..y_count).map(|y| order[y][b % order[y].len()]).collect();

            // Forward pass for the whole batch.
            let mut maps = Vec::with_capacity(y_count);
            let mut caches = Vec::with_capacity(y_count);
            for &s in &batch {
                let (map, cache) = bank.extractor.extract_with_cache(&dataset.samples[s].image)?;
                maps.push(map);
                caches.push(cache);
            }

            // Class-separation surrogate: post-update texture means as a
            // function of the batch features.
            let tex_means: Vec<Vec<S>> = bank
                .models
                .iter()
                .map(|m| m.texture_class_mean())
                .collect::<Result<_>>()?;
            let mut fg_counts = vec![0usize; y_count];
            let mut mu_hat: Vec<Vec<S>> = vec![vec![S::zero(); bank.feature_dim()]; y_count];
            for (slot, &s) in batch.iter().enumerate() {
                let y = dataset.samples[s].class_id;
                let proj = &projections[s];
                let data = maps[slot].as_slice();
                let c = bank.feature_dim();
                for cell in 0..proj.fg_mask.len() {
                    if !proj.fg_mask[cell] {
                        continue;
                    }
                    fg_counts[y] += 1;
                    for k in 0..c {
                        mu_hat[y][k] = mu_hat[y][k] + data[cell * c + k];
                    }
                }
            }
            let mut mu_tilde = Vec::with_capacity(y_count);
            for y in 0..y_count {
                let count = fg_counts[y].max(1);
                let inv = S::one() / real::<S>(count as f64);
                let hat: Vec<S> = mu_hat[y].iter().map(|v| *v * inv).collect();
                mu_tilde.push(ma_blend(&tex_means[y], &hat, eta));
            }
            let mean_grads = if y_count >= 2 {
                class_loss_mean_grads(&mu_tilde)
            } else {
                vec![vec![S::zero(); bank.feature_dim()]; 1]
            };

            // Per-sample feature gradients, then one extractor step.
            let mut total_grad: Option<ExtractorGrad<S>> = None;
            for (slot, &s) in batch.iter().enumerate() {
                let y = dataset.samples[s].class_id;
                let proj = &projections[s];
                let mut pair_rng = seeds::rng(cfg.seed, "pairs", batch_counter * 16 + slot as u64);
                let (_, mut d_map) = con_loss_with_grad(
                    &maps[slot],
                    &proj.fg_mask,
                    cfg.pair_cap,
                    &mut pair_rng,
                )?;
                let fg = proj.foreground_count().max(1);
                let bgc = proj.fg_mask.len() - proj.foreground_count();
                let pairs = (fg * (fg - 1) + fg * bgc).max(1) as f64;
                let con_scale = real::<S>(cfg.w_con / pairs);
                d_map.mapv_inplace(|v| v * con_scale);

                if y_count >= 2 && fg_counts[y] > 0 {
                    let class_scale = real::<S>(cfg.w_class / class_pairs)
                        * eta
                        / real::<S>(fg_counts[y] as f64);
                    let c = bank.feature_dim();
                    let gs = d_map.as_slice_mut().expect("standard layout");
                    for cell in 0..proj.fg_mask.len() {
                        if !proj.fg_mask[cell] {
                            continue;
                        }
                        for k in 0..c {
                            gs[cell * c + k] =
                                gs[cell * c + k] + class_scale * mean_grads[y][k];
                        }
                    }
                }

                let grad = bank.extractor.backward(&caches[slot], &d_map);
                total_grad = Some(match total_grad {
                    None => grad,
                    Some(mut acc) => {
                        accumulate(&mut acc, &grad);
                        acc
                    }
                });
            }
            if let Some(mut g) = total_grad {
                let inv = real::<S>(1.0 / y_count as f64);
                scale_grad(&mut g, inv);
                bank.extractor.apply_grad(
                    &g,
                    real::<S>(cfg.learning_rate),
                    real::<S>(cfg.weight_decay),
                );
            }

            // Moving-average texture and background updates (features from
            // the pre-step extractor).
            for (slot, &s) in batch.iter().enumerate() {
                let y = dataset.samples[s].class_id;
                update_textures_ma(&mut bank.models[y], &maps[slot], &projections[s], eta)?;
                update_background_ma(
                    &mut bank.background.mean,
                    &maps[slot],
                    &projections[s].fg_mask,
                    eta,
                );
            }
            batch_counter += 1;
        }

        // Epoch trace with a fixed per-sample pair stream so values are
        // comparable across epochs.
        let mut con_sum = 0.0f64;
        for (i, s) in dataset.samples.iter().enumerate() {
            let map = bank.extractor.extract(&s.image)?;
            let mut trng = seeds::rng(cfg.seed, "trace", i as u64);
            let l = con_loss(&map, &projections[i].fg_mask, cfg.pair_cap, &mut trng)?;
            con_sum += l.to_f64().unwrap();
        }
        let con_mean = con_sum / dataset.samples.len().max(1) as f64;
        let class_l = if y_count >= 2 {
            class_loss(&bank)?.to_f64().unwrap()
        } else {
            0.0
        };
        let joint = cfg.w_con * con_mean + cfg.w_class * class_l;
        trace.push(EpochLoss {
            epoch: epoch_no,
            con: con_mean,
            class: class_l,
            joint,
        });
        bank.trained_epochs = epoch_no;

        if trace.len() >= 2 {
            let prev = trace[trace.len() - 2].joint;
            let tol = cfg.increase_tolerance * prev.abs() + 1e-12;
            if joint > prev + tol {
                break;
            }
        }
    }

    bank.quantize_f32();
    Ok((bank, trace))
}

fn accumulate<S: Real>(acc: &mut ExtractorGrad<S>, other: &ExtractorGrad<S>) {
    for (a, b) in acc.weight.iter_mut().zip(other.weight.iter()) {
        *a = *a + *b;
    }
    for (a, b) in acc.bias.iter_mut().zip(other.bias.iter()) {
        *a = *a + *b;
    }
    if let (Some(ak), Some(bk)) = (&mut acc.conv, &other.conv) {
        for (a, b) in ak.iter_mut().zip(bk.iter()) {
            *a = *a + *b;
        }
    }
}

fn scale_grad<S: Real>(g: &mut ExtractorGrad<S>, factor: S) {
    for a in g.weight.iter_mut() {
        *a = *a * factor;
    }
    for a in g.bias.iter_mut() {
        *a = *a * factor;
    }
    if let Some(k) = &mut g.conv {
        for a in k.iter_mut() {
            *a = *a * factor;
        }
    }
}

/// Fisher-Yates with the caller's rng.
fn shuffle<T>(items: &mut [T], rng: &mut impl rand::Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::Provenance;
    use crate::mesh::ModelBank;
    use ndarray::{array, Array3};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lattice_cam() -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(12.0, (3.5, 3.5), (8, 8)).unwrap()
    }

    fn tiny_bank(seed: u64) -> ModelBank<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ext = FeatureExtractor::random(2, 4, 8, false, &mut rng);
        ModelBank::initialize(
            &[[1.8, 1.0, 1.2], [1.6, 1.1, 1.3]],
            60,
            4,
            ext,
            seed,
        )
        .unwrap()
    }

    fn toy_dataset(bank: &ModelBank<f64>, per_class: usize, seed: u64) -> TrainSet<f64> {
        // Images rendered from class-specific low-frequency patterns so the
        // extractor has something to separate.
        let cam = lattice_cam().upscaled(8);
        let mut samples = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for y in 0..bank.class_count() {
            for _ in 0..per_class {
                let pose = Pose::new(
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(-0.1..0.9),
                    rng.random_range(-0.4..0.4),
                    5.0,
                )
                .unwrap();
                let proj =
                    crate::camera::project(&bank.models[y], &pose, &cam).unwrap();
                let mut image = Array3::zeros((64, 64, 2));
                for row in 0..64 {
                    for col in 0..64 {
                        let cell = row * 64 + col;
                        if proj.fg_mask[cell] {
                            let v = &bank.models[y].vertices
                                [proj.correspondence[cell] as usize];
                            image[[row, col, 0]] =
                                (v.x() * 2.0 + y as f64).sin() + rng.random_range(-0.05..0.05);
                            image[[row, col, 1]] =
                                (v.y() * 3.0 - y as f64).cos() + rng.random_range(-0.05..0.05);
                        } else {
                            image[[row, col, 0]] = rng.random_range(-0.3..0.3);
                            image[[row, col, 1]] = rng.random_range(-0.3..0.3);
                        }
                    }
                }
                samples.push(TrainSample {
                    image,
                    class_id: y,
                    pose,
                });
            }
        }
        TrainSet { samples }
    }

    #[test]
    fn ma_blend_midpoint() {
        let blended = ma_blend(&[1.0, 0.0], &[0.0, 1.0], 0.5);
        assert_eq!(blended, vec![0.5, 0.5]);
    }

    #[test]
    fn ma_update_full_replacement_and_no_op() {
        let mut bank = tiny_bank(3);
        let model = &mut bank.models[0];
        let r = model.vertex_count();
        let before = model.texture.clone();

        // Assign one pixel to vertex 0 only; eta = 1 replaces its texture
        // with the (renormalized) feature.
        let mut map = FeatureMap::zeros(8, 8, 4);
        map.data[[2, 2, 0]] = 3.0;
        map.provenance = Provenance::Extracted;
        let proj = ProjectedMesh {
            positions: vec![[2.0, 2.0]; r],
            depths: vec![1.0; r],
            visible: vec![true; r],
            fg_mask: {
                let mut m = vec![false; 64];
                m[2 * 8 + 2] = true;
                m
            },
            correspondence: {
                let mut c = vec![u32::MAX; 64];
                c[2 * 8 + 2] = 0;
                c
            },
            grid: (8, 8),
        };
        update_textures_ma(&mut bank.models[0], &map, &proj, 1.0).unwrap();
        let row: Vec<f64> = bank.models[0].texture.row(0).to_vec();
        assert!((row[0] - 1.0).abs() < 1e-12, "renormalized feature direction");
        // Every other vertex is untouched bit-for-bit.
        for r2 in 1..r {
            assert_eq!(
                bank.models[0].texture.row(r2).to_vec(),
                before.row(r2).to_vec()
            );
        }
    }

    #[test]
    fn ma_update_rejects_bad_eta() {
        let mut bank = tiny_bank(4);
        let map = FeatureMap::zeros(8, 8, 4);
        let r = bank.models[0].vertex_count();
        let proj = ProjectedMesh {
            positions: vec![[0.0, 0.0]; r],
            depths: vec![1.0; r],
            visible: vec![false; r],
            fg_mask: vec![false; 64],
            correspondence: vec![u32::MAX; 64],
            grid: (8, 8),
        };
        assert!(update_textures_ma(&mut bank.models[0], &map, &proj, 0.0).is_err());
        assert!(update_textures_ma(&mut bank.models[0], &map, &proj, 1.5).is_err());
    }

    #[test]
    fn ma_blend_is_a_contraction_toward_the_mean() {
        let current = vec![1.0, -0.5, 0.25];
        let target = vec![0.2, 0.3, -0.1];
        for eta in [0.25, 0.5, 0.9] {
            let blended = ma_blend(&current, &target, eta);
            let d_before: f64 = current
                .iter()
                .zip(&target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let d_after: f64 = blended
                .iter()
                .zip(&target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!((d_after - (1.0 - eta) * d_before).abs() < 1e-12);
        }
    }

    #[test]
    fn train_bank_rejects_missing_class_and_bad_eta() {
        let bank = tiny_bank(5);
        let cam = lattice_cam();
        let mut set = toy_dataset(&bank, 2, 11);
        set.samples.retain(|s| s.class_id == 0);
        let err = train_bank(bank.clone(), &set, &cam, &TrainConfig::default());
        assert!(matches!(err, Err(Error::InvalidDataset(_))));

        let set = toy_dataset(&bank, 2, 11);
        let cfg = TrainConfig {
            eta: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_bank(bank, &set, &cam, &cfg),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn training_separates_class_means() {
        let bank = tiny_bank(6);
        let cam = lattice_cam();
        let set = toy_dataset(&bank, 6, 12);
        let initial = class_loss(&bank).unwrap().abs();
        let cfg = TrainConfig {
            epochs: 25,
            seed: 9,
            ..TrainConfig::default()
        };
        let (trained, trace) = train_bank(bank, &set, &cam, &cfg).unwrap();
        assert!(!trace.is_empty());
        let after = class_loss(&trained).unwrap().abs();
        assert!(
            after > initial,
            "class separation should grow: {initial} -> {after}"
        );
    }

    #[test]
    fn class_weight_increases_separation_in_paired_runs() {
        let bank = tiny_bank(7);
        let cam = lattice_cam();
        let set = toy_dataset(&bank, 5, 13);
        let base_cfg = TrainConfig {
            epochs: 20,
            seed: 21,
            ..TrainConfig::default()
        };
        let with = train_bank(bank.clone(), &set, &cam, &base_cfg).unwrap().0;
        let without_cfg = TrainConfig {
            w_class: 0.0,
            ..base_cfg
        };
        let without = train_bank(bank, &set, &cam, &without_cfg).unwrap().0;
        let sep_with = class_loss(&with).unwrap().abs();
        let sep_without = class_loss(&without).unwrap().abs();
        assert!(
            sep_with > sep_without,
            "with {sep_with} <= without {sep_without}"
        );
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let bank = tiny_bank(8);
        let cam = lattice_cam();
        let set = toy_dataset(&bank, 3, 14);
        let cfg = TrainConfig {
            epochs: 6,
            seed: 33,
            ..TrainConfig::default()
        };
        let (bank_a, trace_a) = train_bank(bank.clone(), &set, &cam, &cfg).unwrap();
        let (bank_b, trace_b) = train_bank(bank, &set, &cam, &cfg).unwrap();
        assert_eq!(trace_a, trace_b);
        assert_eq!(bank_a.models[0].texture, bank_b.models[0].texture);
        assert_eq!(bank_a.extractor.weight, bank_b.extractor.weight);
    }

    #[test]
    fn extractor_loss_gradients_match_finite_differences() {
        // Exact-mode contrastive gradient through the pointwise extractor,
        // checked against central differences on the weights.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ext: FeatureExtractor<f64> = FeatureExtractor::random(2, 3, 4, false, &mut rng);
        let image = Array3::from_shape_fn((8, 8, 2), |_| rng.random_range(-1.0..1.0));
        let mask: Vec<bool> = (0..4).map(|i| i % 2 == 0).collect();

        let loss_of = |e: &FeatureExtractor<f64>| -> f64 {
            let map = e.extract(&image).unwrap();
            con_loss(&map, &mask, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
        };

        let (map, cache) = ext.extract_with_cache(&image).unwrap();
        let (_, d_map) =
            con_loss_with_grad(&map, &mask, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let grad = ext.backward(&cache, &d_map);

        let h = 1e-6;
        for i in 0..2 {
            for o in 0..3 {
                let mut up = ext.clone();
                up.weight[[i, o]] += h;
                let mut dn = ext.clone();
                dn.weight[[i, o]] -= h;
                let fd = (loss_of(&up) - loss_of(&dn)) / (2.0 * h);
                let g = grad.weight[[i, o]];
                assert!(
                    (fd - g).abs() / g.abs().max(1e-6) < 1e-3,
                    "weight ({i},{o}): fd {fd} vs {g}"
                );
            }
        }
        for o in 0..3 {
            let mut up = ext.clone();
            up.bias[o] += h;
            let mut dn = ext.clone();
            dn.bias[o] -= h;
            let fd = (loss_of(&up) - loss_of(&dn)) / (2.0 * h);
            assert!((fd - grad.bias[o]).abs() / grad.bias[o].abs().max(1e-6) < 1e-3);
        }
    }

    #[test]
    fn conv_extractor_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ext: FeatureExtractor<f64> = FeatureExtractor::random(2, 3, 4, true, &mut rng);
        let image = Array3::from_shape_fn((8, 8, 2), |_| rng.random_range(-1.0..1.0));
        let mask: Vec<bool> = vec![true, false, true, false];

        let loss_of = |e: &FeatureExtractor<f64>| -> f64 {
            let map = e.extract(&image).unwrap();
            con_loss(&map, &mask, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
        };

        let (map, cache) = ext.extract_with_cache(&image).unwrap();
        let (_, d_map) =
            con_loss_with_grad(&map, &mask, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let grad = ext.backward(&cache, &d_map);
        let gk = grad.conv.as_ref().unwrap();

        let h = 1e-6;
        for dy in 0..3 {
            for dx in 0..3 {
                let mut up = ext.clone();
                up.conv.as_mut().unwrap()[[dy, dx, 1, 2]] += h;
                let mut dn = ext.clone();
                dn.conv.as_mut().unwrap()[[dy, dx, 1, 2]] -= h;
                let fd = (loss_of(&up) - loss_of(&dn)) / (2.0 * h);
                let g = gk[[dy, dx, 1, 2]];
                assert!(
                    (fd - g).abs() / g.abs().max(1e-6) < 1e-3,
                    "kernel ({dy},{dx}): fd {fd} vs {g}"
                );
            }
        }
    }

    #[test]
    fn epoch_numbering_continues_from_trained_epochs() {
        let bank = tiny_bank(15);
        let cam = lattice_cam();
        let set = toy_dataset(&bank, 2, 16);
        let cfg = TrainConfig {
            epochs: 3,
            seed: 5,
            ..TrainConfig::default()
        };
        let (bank2, trace1) = train_bank(bank, &set, &cam, &cfg).unwrap();
        assert_eq!(
            trace1.iter().map(|t| t.epoch).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        let (_, trace2) = train_bank(bank2, &set, &cam, &cfg).unwrap();
        assert_eq!(
            trace2.iter().map(|t| t.epoch).collect::<Vec<_>>(),
            vec![4, 5, 6]
        );
    }

    #[test]
    fn blend_texture_example() {
        let t = array![[1.0, 0.0]];
        let model = NeuralMeshModel::new(
            0,
            vec![crate::geom::Vec3::new(0.0, 0.0, 1.0)],
            t,
            [2.0, 2.0, 2.0],
        )
        .unwrap();
        let blended = ma_blend(&model.texture.row(0).to_vec(), &[0.0, 1.0], 0.5);
        assert_eq!(blended, vec![0.5, 0.5]);
    }
}
