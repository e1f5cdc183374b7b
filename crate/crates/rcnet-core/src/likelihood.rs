//! Reconstruction likelihood of a feature map under a posed neural mesh:
//! the exact lattice negative log-likelihood used for scoring and
//! classification, a bilinearly-sampled differentiable form used for pose
//! optimization, analytic pose gradients, and the normalized match score.

use ndarray::{Array2, Array3};

use crate::camera::{project, rotation_derivatives, CameraIntrinsics, Pose, ProjectedMesh};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::mesh::{BackgroundModel, NeuralMeshModel};
use crate::scalar::{real, Real};

/// Where a feature map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Produced by the feature extractor from an image.
    Extracted,
    /// Rendered from a mesh texture (synthetic target).
    Rendered,
}

/// H x W x c real-valued feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<S: Real = f64> {
    pub data: Array3<S>,
    pub provenance: Provenance,
}

impl<S: Real> FeatureMap<S> {
    pub fn new(data: Array3<S>, provenance: Provenance) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_argument("feature map has non-finite entries"));
        }
        Ok(FeatureMap { data, provenance })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        FeatureMap {
            data: Array3::zeros((h, w, c)),
            provenance: Provenance::Rendered,
        }
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.data.dim();
        (d.0, d.1, d.2)
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[S] {
        let (_, w, c) = self.dims();
        let base = (row * w + col) * c;
        &self.as_slice()[base..base + c]
    }

    #[inline]
    pub fn as_slice(&self) -> &[S] {
        self.data.as_slice().expect("standard layout")
    }
}

fn check_dims<S: Real>(
    map: &FeatureMap<S>,
    proj: &ProjectedMesh<S>,
    texture: &Array2<S>,
    bg_dim: Option<usize>,
) -> Result<(usize, usize, usize)> {
    let (h, w, c) = map.dims();
    if proj.grid != (h, w) {
        return Err(Error::invalid_argument(format!(
            "projection lattice {:?} != map lattice {:?}",
            proj.grid,
            (h, w)
        )));
    }
    if texture.ncols() != c {
        return Err(Error::invalid_argument(format!(
            "texture dim {} != map channels {c}",
            texture.ncols()
        )));
    }
    if proj.positions.len() != texture.nrows() {
        return Err(Error::invalid_argument(
            "projection vertex count != texture rows",
        ));
    }
    if let Some(bd) = bg_dim {
        if bd != c {
            return Err(Error::invalid_argument(format!(
                "background dim {bd} != map channels {c}"
            )));
        }
    }
    Ok((h, w, c))
}

/// Exact lattice negative log-likelihood (unit variances, constant terms
/// dropped): half the squared error to the corresponding vertex texture on
/// foreground cells plus half the squared error to the background mean on
/// the rest.
pub fn nll<S: Real>(
    map: &FeatureMap<S>,
    proj: &ProjectedMesh<S>,
    texture: &Array2<S>,
    bg: &BackgroundModel<S>,
) -> Result<S> {
    let (h, w, c) = check_dims(map, proj, texture, Some(bg.mean.len()))?;
    let data = map.as_slice();
    let half = real::<S>(0.5);
    let mut acc = S::zero();
    for row in 0..h {
        for col in 0..w {
            let cell = row * w + col;
            let f = &data[cell * c..cell * c + c];
            if proj.fg_mask[cell] {
                let r = proj.correspondence[cell] as usize;
                let tex = texture.row(r);
                let mut d2 = S::zero();
                for (fv, tv) in f.iter().zip(tex.iter()) {
                    let d = *fv - *tv;
                    d2 = d2 + d * d;
                }
                acc = acc + half * d2;
            } else {
                let mut d2 = S::zero();
                for (fv, bv) in f.iter().zip(bg.mean.iter()) {
                    let d = *fv - *bv;
                    d2 = d2 + d * d;
                }
                acc = acc + half * d2;
            }
        }
    }
    Ok(acc)
}

/// Render the feature map a posed mesh predicts: vertex textures on
/// foreground cells, the background mean elsewhere.
pub fn render_feature_map<S: Real>(
    proj: &ProjectedMesh<S>,
    texture: &Array2<S>,
    bg: &BackgroundModel<S>,
) -> FeatureMap<S> {
    let (h, w) = proj.grid;
    let c = texture.ncols();
    let mut data = Array3::zeros((h, w, c));
    for row in 0..h {
        for col in 0..w {
            let cell = row * w + col;
            if proj.fg_mask[cell] {
                let r = proj.correspondence[cell] as usize;
                for (k, &t) in texture.row(r).iter().enumerate() {
                    data[[row, col, k]] = t;
                }
            } else {
                for (k, &b) in bg.mean.iter().enumerate() {
                    data[[row, col, k]] = b;
                }
            }
        }
    }
    FeatureMap {
        data,
        provenance: Provenance::Rendered,
    }
}

/// Bilinear sample of every channel at continuous lattice coordinates,
/// clamped to the lattice. Returns the channel values.
pub fn bilinear_sample<S: Real>(map: &FeatureMap<S>, u: S, v: S) -> Vec<S> {
    let (_, _, c) = map.dims();
    let mut out = vec![S::zero(); c];
    let mut scratch = vec![S::zero(); 2 * c];
    sample_with_grad(map, u, v, &mut out, &mut scratch);
    out
}

/// Bilinear sample plus partial derivatives wrt (u, v). `grad` holds the
/// per-channel du derivatives followed by the dv derivatives. Outside the
/// lattice the sample clamps and the corresponding derivative is zero.
fn sample_with_grad<S: Real>(map: &FeatureMap<S>, u: S, v: S, value: &mut [S], grad: &mut [S]) {
    let (h, w, c) = map.dims();
    let data = map.as_slice();
    let one = S::one();

    let (x0, fu, du_active) = clamp_axis(u, w);
    let (y0, fv, dv_active) = clamp_axis(v, h);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);

    let p00 = (y0 * w + x0) * c;
    let p01 = (y0 * w + x1) * c;
    let p10 = (y1 * w + x0) * c;
    let p11 = (y1 * w + x1) * c;

    let w00 = (one - fu) * (one - fv);
    let w01 = fu * (one - fv);
    let w10 = (one - fu) * fv;
    let w11 = fu * fv;

    for k in 0..c {
        let f00 = data[p00 + k];
        let f01 = data[p01 + k];
        let f10 = data[p10 + k];
        let f11 = data[p11 + k];
        value[k] = w00 * f00 + w01 * f01 + w10 * f10 + w11 * f11;
        grad[k] = if du_active {
            (one - fv) * (f01 - f00) + fv * (f11 - f10)
        } else {
            S::zero()
        };
        grad[c + k] = if dv_active {
            (one - fu) * (f10 - f00) + fu * (f11 - f01)
        } else {
            S::zero()
        };
    }
}

/// Clamp a continuous coordinate to [0, n-1]; returns the lower cell, the
/// fractional offset, and whether the derivative along this axis is live.
fn clamp_axis<S: Real>(x: S, n: usize) -> (usize, S, bool) {
    let max = real::<S>((n - 1) as f64);
    if n == 1 || x <= S::zero() {
        return (0, S::zero(), false);
    }
    if x >= max {
        return (n - 2, S::one(), false);
    }
    let x0 = x.floor();
    let i = x0.to_f64().unwrap() as usize;
    let i = i.min(n - 2);
    (i, x - real::<S>(i as f64), true)
}

/// Visibility and background mask frozen at a reference pose, so the
/// sampled loss stays smooth while the pose moves.
#[derive(Debug, Clone)]
pub struct FrozenView {
    pub visible: Vec<usize>,
    pub fg_mask: Vec<bool>,
}

impl FrozenView {
    pub fn from_projection<S: Real>(proj: &ProjectedMesh<S>) -> Self {
        FrozenView {
            visible: proj.visible_indices(),
            fg_mask: proj.fg_mask.clone(),
        }
    }
}

/// Differentiable surrogate of [`nll`]: for each visible vertex, compare
/// the bilinearly sampled map at its continuous projection against its
/// texture; the background term runs over the complement mask exactly as
/// in the lattice form. Visibility is resolved at the queried pose.
pub fn vertex_sampled_nll<S: Real>(
    map: &FeatureMap<S>,
    mesh: &NeuralMeshModel<S>,
    pose: &Pose<S>,
    cam: &CameraIntrinsics<S>,
    bg: &BackgroundModel<S>,
) -> Result<S> {
    let proj = project(mesh, pose, cam)?;
    let frozen = FrozenView::from_projection(&proj);
    sampled_nll_frozen(map, mesh, pose, cam, bg, &frozen)
}

/// [`vertex_sampled_nll`] with visibility and background mask pinned by
/// `frozen` instead of recomputed; this is the exact function the analytic
/// pose gradient differentiates.
pub fn sampled_nll_frozen<S: Real>(
    map: &FeatureMap<S>,
    mesh: &NeuralMeshModel<S>,
    pose: &Pose<S>,
    cam: &CameraIntrinsics<S>,
    bg: &BackgroundModel<S>,
    frozen: &FrozenView,
) -> Result<S> {
    let (h, w, c) = map.dims();
    if mesh.feature_dim() != c || bg.mean.len() != c {
        return Err(Error::invalid_argument("feature dims disagree"));
    }
    if frozen.fg_mask.len() != h * w {
        return Err(Error::invalid_argument("frozen mask size mismatch"));
    }
    pose.validate()?;

    let r = pose.rotation();
    let t = Vec3::new(S::zero(), S::zero(), pose.distance);
    let min_depth = real::<S>(1e-6);
    let half = real::<S>(0.5);

    let mut value = vec![S::zero(); c];
    let mut grad_scratch = vec![S::zero(); 2 * c];
    let mut acc = S::zero();
    for &vi in &frozen.visible {
        let xc = r.mul_vec(&mesh.vertices[vi]).add(&t);
        let z = xc.z();
        if z <= min_depth {
            continue;
        }
        let u = cam.focal * xc.x() / z + cam.principal.0;
        let v = cam.focal * xc.y() / z + cam.principal.1;
        sample_with_grad(map, u, v, &mut value, &mut grad_scratch);
        let tex = mesh.texture.row(vi);
        let mut d2 = S::zero();
        for (fv, tv) in value.iter().zip(tex.iter()) {
            let d = *fv - *tv;
            d2 = d2 + d * d;
        }
        acc = acc + half * d2;
    }

    let data = map.as_slice();
    for (cell, &fg) in frozen.fg_mask.iter().enumerate() {
        if fg {
            continue;
        }
        let f = &data[cell * c..cell * c + c];
        let mut d2 = S::zero();
        for (fv, bv) in f.iter().zip(bg.mean.iter()) {
            let d = *fv - *bv;
            d2 = d2 + d * d;
        }
        acc = acc + half * d2;
    }
    Ok(acc)
}

/// Analytic gradient of the frozen sampled loss wrt
/// (azimuth, elevation, theta), chained through the projection and the
/// bilinear interpolation. The background term is constant under the
/// frozen mask and contributes nothing.
pub fn pose_gradient_frozen<S: Real>(
    map: &FeatureMap<S>,
    mesh: &NeuralMeshModel<S>,
    pose: &Pose<S>,
    cam: &CameraIntrinsics<S>,
    frozen: &FrozenView,
) -> Result<[S; 3]> {
    let (_, _, c) = map.dims();
    if mesh.feature_dim() != c {
        return Err(Error::invalid_argument("feature dims disagree"));
    }
    pose.validate()?;

    let (r, dr) = rotation_derivatives(pose);
    let t = Vec3::new(S::zero(), S::zero(), pose.distance);
    let min_depth = real::<S>(1e-6);

    let mut value = vec![S::zero(); c];
    let mut grads = vec![S::zero(); 2 * c];
    let mut out = [S::zero(); 3];

    for &vi in &frozen.visible {
        let vert = &mesh.vertices[vi];
        let xc = r.mul_vec(vert).add(&t);
        let z = xc.z();
        if z <= min_depth {
            continue;
        }
        let u = cam.focal * xc.x() / z + cam.principal.0;
        let v = cam.focal * xc.y() / z + cam.principal.1;
        sample_with_grad(map, u, v, &mut value, &mut grads);

        let tex = mesh.texture.row(vi);
        let z2 = z * z;
        for (p, drp) in dr.iter().enumerate() {
            let dxc = drp.mul_vec(vert);
            let du = cam.focal * (dxc.x() * z - xc.x() * dxc.z()) / z2;
            let dv = cam.focal * (dxc.y() * z - xc.y() * dxc.z()) / z2;
            let mut g = S::zero();
            for k in 0..c {
                let resid = value[k] - tex[k];
                g = g + resid * (grads[k] * du + grads[c + k] * dv);
            }
            out[p] = out[p] + g;
        }
    }
    Ok(out)
}

/// Pose gradient with visibility resolved (then frozen) at the queried pose.
pub fn pose_gradient<S: Real>(
    map: &FeatureMap<S>,
    mesh: &NeuralMeshModel<S>,
    pose: &Pose<S>,
    cam: &CameraIntrinsics<S>,
) -> Result<[S; 3]> {
    let proj = project(mesh, pose, cam)?;
    let frozen = FrozenView::from_projection(&proj);
    pose_gradient_frozen(map, mesh, pose, cam, &frozen)
}

/// Normalized foreground agreement in [0, 1]: mean over foreground cells of
/// `(1 + cos(f_i, C_r(i)))/2`. Zero-norm vectors count as cosine 0; an
/// empty foreground scores 0.
pub fn match_score<S: Real>(
    map: &FeatureMap<S>,
    proj: &ProjectedMesh<S>,
    texture: &Array2<S>,
) -> Result<S> {
    let (h, w, c) = check_dims(map, proj, texture, None)?;
    let data = map.as_slice();
    let half = real::<S>(0.5);
    let mut acc = S::zero();
    let mut count = 0usize;
    for cell in 0..h * w {
        if !proj.fg_mask[cell] {
            continue;
        }
        count += 1;
        let f = &data[cell * c..cell * c + c];
        let tex = texture.row(proj.correspondence[cell] as usize);
        let mut dot = S::zero();
        let mut nf = S::zero();
        let mut nt = S::zero();
        for (fv, tv) in f.iter().zip(tex.iter()) {
            dot = dot + *fv * *tv;
            nf = nf + *fv * *fv;
            nt = nt + *tv * *tv;
        }
        let denom = (nf * nt).sqrt();
        let cos = if denom > S::zero() { dot / denom } else { S::zero() };
        acc = acc + half * (S::one() + cos);
    }
    if count == 0 {
        return Ok(S::zero());
    }
    Ok(acc / real::<S>(count as f64))
}

/// Scoring summary for one (map, posed mesh) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionReport<S: Real = f64> {
    pub nll: S,
    pub foreground_count: usize,
    pub background_count: usize,
    pub match_score: S,
}

impl<S: Real> ReconstructionReport<S> {
    pub fn compute(
        map: &FeatureMap<S>,
        proj: &ProjectedMesh<S>,
        texture: &Array2<S>,
        bg: &BackgroundModel<S>,
    ) -> Result<Self> {
        let (h, w, _) = check_dims(map, proj, texture, Some(bg.mean.len()))?;
        let fg = proj.foreground_count();
        Ok(ReconstructionReport {
            nll: nll(map, proj, texture, bg)?,
            foreground_count: fg,
            background_count: h * w - fg,
            match_score: match_score(map, proj, texture)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::project_points;
    use crate::mesh::{build_cuboid, init_textures};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pose(az: f64, el: f64, th: f64, d: f64) -> Pose<f64> {
        Pose::new(az, el, th, d).unwrap()
    }

    fn random_mesh(seed: u64, dims: [f64; 3], target: usize, c: usize) -> NeuralMeshModel<f64> {
        let verts = build_cuboid(dims, target).unwrap();
        let n = verts.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tex = init_textures(n, c, &mut rng).unwrap();
        NeuralMeshModel::new(0, verts, tex, dims).unwrap()
    }

    fn random_map(seed: u64, h: usize, w: usize, c: usize) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((h, w, c), |_| rng.random_range(-1.0..1.0));
        FeatureMap::new(data, Provenance::Extracted).unwrap()
    }

    #[test]
    fn perfect_reconstruction_scores_zero() {
        let mesh = random_mesh(1, [2.0, 1.0, 1.3], 300, 4);
        let cam = CameraIntrinsics::new(12.0, (5.5, 5.5), (12, 12)).unwrap();
        let bg = BackgroundModel::new(vec![0.2, -0.1, 0.0, 0.4], 1.0).unwrap();
        let p = pose(0.8, 0.3, -0.1, 5.0);
        let proj = project(&mesh, &p, &cam).unwrap();
        let rendered = render_feature_map(&proj, &mesh.texture, &bg);
        let loss = nll(&rendered, &proj, &mesh.texture, &bg).unwrap();
        assert_eq!(loss, 0.0);
        let report = ReconstructionReport::compute(&rendered, &proj, &mesh.texture, &bg).unwrap();
        assert_eq!(report.foreground_count + report.background_count, 144);
        assert!((report.match_score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_foreground_pixel_unit_error_gives_half() {
        // One vertex projecting onto a 1x1 lattice: the whole lattice is
        // foreground, so there is no background term.
        let verts = vec![Vec3::new(0.0, 0.0, 1.0)];
        let tex = array![[1.0, 0.0]];
        let cam = CameraIntrinsics::new(5.0, (0.0, 0.0), (1, 1)).unwrap();
        let proj = project_points(&verts, &pose(0.0, 0.0, 0.0, 5.0), &cam, 0.5).unwrap();
        assert_eq!(proj.foreground_count(), 1);
        let mut map = FeatureMap::zeros(1, 1, 2);
        map.data[[0, 0, 0]] = 1.0;
        map.data[[0, 0, 1]] = 1.0; // distance to texture (1,0) is exactly 1
        let bg = BackgroundModel::new(vec![0.0, 0.0], 1.0).unwrap();
        let loss = nll(&map, &proj, &tex, &bg).unwrap();
        assert!((loss - 0.5).abs() < 1e-15);
    }

    #[test]
    fn nll_matches_pixelwise_oracle() {
        // Independent oracle: accumulate per-pixel squared errors channel
        // by channel in a separate pass.
        let mesh = random_mesh(2, [2.0, 1.0, 1.0], 200, 4);
        let cam = CameraIntrinsics::new(8.0, (3.5, 3.5), (8, 8)).unwrap();
        let bg = BackgroundModel::new(vec![0.1, 0.2, -0.3, 0.0], 1.0).unwrap();
        for seed in 0..50 {
            let p = pose(0.1 + 0.11 * seed as f64 % 6.0, 0.3, 0.0, 5.0);
            let proj = project(&mesh, &p, &cam).unwrap();
            let map = random_map(100 + seed as u64, 8, 8, 4);
            let loss = nll(&map, &proj, &mesh.texture, &bg).unwrap();

            let mut oracle = 0.0f64;
            for row in 0..8 {
                for col in 0..8 {
                    let cell = row * 8 + col;
                    for k in 0..4 {
                        let f = map.data[[row, col, k]];
                        let target = if proj.fg_mask[cell] {
                            mesh.texture[[proj.correspondence[cell] as usize, k]]
                        } else {
                            bg.mean[k]
                        };
                        oracle += 0.5 * (f - target) * (f - target);
                    }
                }
            }
            let rel = (loss - oracle).abs() / oracle.abs().max(1e-30);
            assert!(rel < 1e-9, "rel {rel}");
        }
    }

    #[test]
    fn nll_rejects_dimension_mismatch() {
        let mesh = random_mesh(3, [2.0, 2.0, 2.0], 60, 4);
        let cam = CameraIntrinsics::new(8.0, (3.5, 3.5), (8, 8)).unwrap();
        let proj = project(&mesh, &pose(0.0, 0.0, 0.0, 5.0), &cam).unwrap();
        let map = random_map(9, 8, 8, 3);
        let bg = BackgroundModel::new(vec![0.0; 3], 1.0).unwrap();
        assert!(nll(&map, &proj, &mesh.texture, &bg).is_err());
    }

    #[test]
    fn exactly_aligned_vertex_contributes_zero() {
        // Vertex (1,1,1) of a 2-cube at pose (0,0,0,5): depth 6, so with
        // focal 12 and principal 3 it lands exactly on lattice point (5,5).
        let verts = vec![Vec3::new(1.0, 1.0, 1.0)];
        let tex = array![[0.3, -0.7]];
        let mesh = NeuralMeshModel::new(0, verts, tex, [2.0, 2.0, 2.0]).unwrap();
        let cam = CameraIntrinsics::new(12.0, (3.0, 3.0), (9, 9)).unwrap();
        let bg = BackgroundModel::new(vec![0.0, 0.0], 1.0).unwrap();
        let mut map = FeatureMap::zeros(9, 9, 2);
        map.data[[5, 5, 0]] = 0.3;
        map.data[[5, 5, 1]] = -0.7;
        let loss = vertex_sampled_nll(&map, &mesh, &pose(0.0, 0.0, 0.0, 5.0), &cam, &bg).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn bilinear_midpoint_matches_average() {
        // Vertex (0.75, 1, 0) at distance 5 with focal 10, principal (3,1):
        // u = 10*0.75/5 + 3 = 4.5, v = 10*1/5 + 1 = 3.
        let verts = vec![Vec3::new(0.75, 1.0, 0.0)];
        let tex = array![[0.5, 0.5]]; // midpoint of the two pixel features
        let mesh = NeuralMeshModel::new(0, verts, tex, [2.0, 2.0, 2.0]).unwrap();
        let cam = CameraIntrinsics::new(10.0, (3.0, 1.0), (8, 8)).unwrap();
        let bg = BackgroundModel::new(vec![0.0, 0.0], 1.0).unwrap();
        let mut map = FeatureMap::zeros(8, 8, 2);
        map.data[[3, 4, 0]] = 1.0;
        map.data[[3, 4, 1]] = 0.0;
        map.data[[3, 5, 0]] = 0.0;
        map.data[[3, 5, 1]] = 1.0;
        let loss = vertex_sampled_nll(&map, &mesh, &pose(0.0, 0.0, 0.0, 5.0), &cam, &bg).unwrap();
        assert!(loss.abs() < 1e-15);
    }

    #[test]
    fn sampled_nll_matches_four_neighbor_oracle() {
        let mesh = random_mesh(4, [2.0, 1.2, 1.0], 120, 3);
        let cam = CameraIntrinsics::new(10.0, (5.5, 5.5), (12, 12)).unwrap();
        let bg = BackgroundModel::new(vec![0.1, -0.2, 0.05], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..20 {
            let p = pose(
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(-0.17..1.0),
                rng.random_range(-0.5..0.5),
                5.0,
            );
            let map = random_map(200 + trial, 12, 12, 3);
            let loss = vertex_sampled_nll(&map, &mesh, &p, &cam, &bg).unwrap();

            // Oracle: explicit 4-neighbour bilinear enumeration.
            let proj = project(&mesh, &p, &cam).unwrap();
            let mut oracle = 0.0f64;
            for (i, &vis) in proj.visible.iter().enumerate() {
                if !vis {
                    continue;
                }
                let [u, v] = proj.positions[i];
                let uc = u.clamp(0.0, 11.0);
                let vc = v.clamp(0.0, 11.0);
                let x0 = (uc.floor() as usize).min(10);
                let y0 = (vc.floor() as usize).min(10);
                let fu = uc - x0 as f64;
                let fv = vc - y0 as f64;
                for k in 0..3 {
                    let s = (1.0 - fu) * (1.0 - fv) * map.data[[y0, x0, k]]
                        + fu * (1.0 - fv) * map.data[[y0, x0 + 1, k]]
                        + (1.0 - fu) * fv * map.data[[y0 + 1, x0, k]]
                        + fu * fv * map.data[[y0 + 1, x0 + 1, k]];
                    let d = s - mesh.texture[[i, k]];
                    oracle += 0.5 * d * d;
                }
            }
            for cell in 0..144 {
                if proj.fg_mask[cell] {
                    continue;
                }
                for k in 0..3 {
                    let d = map.data[[cell / 12, cell % 12, k]] - bg.mean[k];
                    oracle += 0.5 * d * d;
                }
            }
            let rel = (loss - oracle).abs() / oracle.abs().max(1e-30);
            assert!(rel < 1e-9, "trial {trial}: rel {rel}");
        }
    }

    /// Random configuration for finite-difference checks. Rejects poses
    /// that put any visible vertex within `margin` of a bilinear grid line
    /// or the lattice border, where the sampled loss is non-smooth.
    pub(crate) fn fd_config(
        seed: u64,
        c: usize,
    ) -> (
        FeatureMap<f64>,
        NeuralMeshModel<f64>,
        Pose<f64>,
        CameraIntrinsics<f64>,
        FrozenView,
    ) {
        let cam = CameraIntrinsics::new(10.0, (5.5, 5.5), (12, 12)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let margin = 2e-3;
        loop {
            let dims = [
                rng.random_range(1.2..2.2),
                rng.random_range(0.8..1.4),
                rng.random_range(0.8..1.8),
            ];
            let verts = build_cuboid(dims, rng.random_range(40..90)).unwrap();
            let n = verts.len();
            let mut trng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
            let tex = init_textures(n, c, &mut trng).unwrap();
            let mesh = NeuralMeshModel::new(0, verts, tex, dims).unwrap();
            let p = pose(
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(-0.15..0.95),
                rng.random_range(-0.45..0.45),
                rng.random_range(4.2..6.5),
            );
            let proj = project(&mesh, &p, &cam).unwrap();
            if proj.foreground_count() < 4 {
                continue;
            }
            let smooth = proj.visible.iter().enumerate().all(|(i, &vis)| {
                if !vis {
                    return true;
                }
                let [u, v] = proj.positions[i];
                let inside = u > 0.2 && u < 10.8 && v > 0.2 && v < 10.8;
                let off_grid = (u - u.round()).abs() > margin && (v - v.round()).abs() > margin;
                inside && off_grid
            });
            if !smooth {
                continue;
            }
            let mut mrng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A);
            let data = Array3::from_shape_fn((12, 12, c), |_| mrng.random_range(-1.0..1.0));
            let map = FeatureMap::new(data, Provenance::Extracted).unwrap();
            let frozen = FrozenView::from_projection(&proj);
            return (map, mesh, p, cam, frozen);
        }
    }

    pub(crate) fn check_fd(seed: u64) {
        let (map, mesh, p, cam, frozen) = fd_config(seed, 4);
        let analytic = pose_gradient_frozen(&map, &mesh, &p, &cam, &frozen).unwrap();
        let h = 1e-4;
        for axis in 0..3 {
            let mut lo = p;
            let mut hi = p;
            match axis {
                0 => {
                    lo.azimuth -= h;
                    hi.azimuth += h;
                }
                1 => {
                    lo.elevation -= h;
                    hi.elevation += h;
                }
                _ => {
                    lo.theta -= h;
                    hi.theta += h;
                }
            }
            let f_lo = sampled_nll_frozen(&map, &mesh, &lo, &cam, &bg_zero(4), &frozen).unwrap();
            let f_hi = sampled_nll_frozen(&map, &mesh, &hi, &cam, &bg_zero(4), &frozen).unwrap();
            let fd = (f_hi - f_lo) / (2.0 * h);
            let denom = analytic[axis].abs().max(fd.abs()).max(1e-9);
            let rel = (fd - analytic[axis]).abs() / denom;
            assert!(
                rel < 1e-3,
                "seed {seed} axis {axis}: analytic {} fd {fd} rel {rel}",
                analytic[axis]
            );
        }
    }

    fn bg_zero(c: usize) -> BackgroundModel<f64> {
        BackgroundModel::new(vec![0.0; c], 1.0).unwrap()
    }

    #[test]
    fn pose_gradient_matches_finite_differences() {
        for seed in 0..30 {
            check_fd(seed);
        }
    }

    #[test]
    fn gradient_vanishes_at_exact_minimum() {
        // A 5x5 front-face grid engineered to land exactly on lattice
        // points: dims 2, distance 3, focal 4 puts the z=-1 face vertices
        // at u = 2x + u0. The rendered map then equals the textures at
        // every sample position, so all residuals are exactly zero.
        let face = build_cuboid([2.0, 2.0, 2.0], 8).unwrap();
        let mut verts: Vec<Vec3<f64>> = Vec::new();
        for ix in 0..5 {
            for iy in 0..5 {
                verts.push(Vec3::new(
                    -1.0 + 0.5 * ix as f64,
                    -1.0 + 0.5 * iy as f64,
                    -1.0,
                ));
            }
        }
        drop(face);
        let n = verts.len();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let tex = init_textures(n, 3, &mut rng).unwrap();
        let mesh = NeuralMeshModel::new(0, verts, tex, [2.0, 2.0, 2.0]).unwrap();
        let cam = CameraIntrinsics::new(4.0, (5.0, 5.0), (11, 11)).unwrap();
        let p = pose(0.0, 0.0, 0.0, 3.0);
        let proj = project(&mesh, &p, &cam).unwrap();
        for (i, &vis) in proj.visible.iter().enumerate() {
            assert!(vis, "vertex {i} should be visible");
            let [u, v] = proj.positions[i];
            assert!((u - u.round()).abs() < 1e-12);
            assert!((v - v.round()).abs() < 1e-12);
        }
        let bg = bg_zero(3);
        let map = render_feature_map(&proj, &mesh.texture, &bg);
        let loss = vertex_sampled_nll(&map, &mesh, &p, &cam, &bg).unwrap();
        assert_eq!(loss, 0.0);
        let g = pose_gradient(&map, &mesh, &p, &cam).unwrap();
        let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        assert!(norm < 1e-6, "gradient norm {norm}");
    }

    #[test]
    fn azimuth_gradient_vanishes_at_mirror_symmetric_pose() {
        // Mirror-symmetric construction: vertices paired under x -> -x with
        // equal textures, even grid (no x=0 vertices), symmetric lattice
        // (2*u0 integral), theta = 0. The sampled loss is then even in the
        // azimuth around zero, so its azimuth derivative vanishes.
        let xs = [-0.9, -0.5, -0.2, 0.2, 0.5, 0.9];
        let ys = [-0.8, -0.3, 0.3, 0.8];
        let mut verts = Vec::new();
        for &x in &xs {
            for &y in &ys {
                verts.push(Vec3::new(x, y, -0.6));
            }
        }
        let n = verts.len();
        let mut tex = Array2::zeros((n, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for i in 0..n {
            let v = &verts[i];
            // Texture must satisfy C(x,y,z) = C(-x,y,z); build it from a
            // seeded hash of (|x|, y).
            let _ = &mut rng;
            tex[[i, 0]] = (v.x().abs() * 3.1 + v.y()).sin();
            tex[[i, 1]] = (v.x().abs() * 1.7 - 2.0 * v.y()).cos();
            tex[[i, 2]] = v.x().abs() - 0.5 * v.y();
        }
        let mesh = NeuralMeshModel::new(0, verts, tex, [1.8, 1.6, 1.2]).unwrap();
        let cam = CameraIntrinsics::new(10.0, (6.0, 6.0), (13, 13)).unwrap();
        let p = pose(0.0, 0.35, 0.0, 5.0);
        let proj = project(&mesh, &p, &cam).unwrap();
        // Sanity: nothing sits on a bilinear grid line.
        for (i, &vis) in proj.visible.iter().enumerate() {
            assert!(vis);
            let [u, v] = proj.positions[i];
            assert!((u - u.round()).abs() > 1e-3, "u {u}");
            assert!((v - v.round()).abs() > 1e-3, "v {v}");
        }
        let bg = bg_zero(3);
        let map = render_feature_map(&proj, &mesh.texture, &bg);
        let g = pose_gradient(&map, &mesh, &p, &cam).unwrap();
        assert!(g[0].abs() < 1e-8, "azimuth gradient {}", g[0]);
    }

    #[test]
    fn match_score_trivial_values() {
        let mesh = random_mesh(6, [2.0, 1.0, 1.0], 150, 3);
        let cam = CameraIntrinsics::new(10.0, (5.5, 5.5), (12, 12)).unwrap();
        let bg = bg_zero(3);
        let p = pose(0.4, 0.3, 0.1, 5.0);
        let proj = project(&mesh, &p, &cam).unwrap();

        let aligned = render_feature_map(&proj, &mesh.texture, &bg);
        assert!((match_score(&aligned, &proj, &mesh.texture).unwrap() - 1.0).abs() < 1e-12);

        let mut anti = aligned.clone();
        anti.data.mapv_inplace(|v| -v);
        // Background cells are zero either way; only foreground matters.
        assert!(match_score(&anti, &proj, &mesh.texture).unwrap() < 1e-12);

        // Orthogonal features everywhere: rotate each foreground feature
        // into a channel pattern orthogonal to the texture.
        let mut ortho = FeatureMap::zeros(12, 12, 3);
        for cell in 0..144 {
            if proj.fg_mask[cell] {
                let r = proj.correspondence[cell] as usize;
                let t = [
                    mesh.texture[[r, 0]],
                    mesh.texture[[r, 1]],
                    mesh.texture[[r, 2]],
                ];
                // (t1, -t0, 0) is orthogonal to (t0, t1, t2) when t2 = 0;
                // instead use a vector orthogonal by construction.
                let o = [t[1] - t[2], t[2] - t[0], t[0] - t[1]];
                ortho.data[[cell / 12, cell % 12, 0]] = o[0];
                ortho.data[[cell / 12, cell % 12, 1]] = o[1];
                ortho.data[[cell / 12, cell % 12, 2]] = o[2];
            }
        }
        // (t x 1) ... o . t = t0 t1 - t0 t2 + t1 t2 - t0 t1 + t0 t2 - t1 t2 = 0.
        let score = match_score(&ortho, &proj, &mesh.texture).unwrap();
        assert!((score - 0.5).abs() < 1e-12, "score {score}");

        let empty = ProjectedMesh {
            positions: proj.positions.clone(),
            depths: proj.depths.clone(),
            visible: vec![false; mesh.vertex_count()],
            fg_mask: vec![false; 144],
            correspondence: vec![u32::MAX; 144],
            grid: (12, 12),
        };
        assert_eq!(match_score(&aligned, &empty, &mesh.texture).unwrap(), 0.0);
    }

    #[test]
    fn replacing_texture_with_feature_never_increases_nll() {
        let mesh = random_mesh(8, [2.0, 1.0, 1.0], 150, 3);
        let cam = CameraIntrinsics::new(10.0, (5.5, 5.5), (12, 12)).unwrap();
        let bg = bg_zero(3);
        let p = pose(1.2, 0.2, 0.0, 5.0);
        let proj = project(&mesh, &p, &cam).unwrap();
        let map = random_map(55, 12, 12, 3);
        let base = nll(&map, &proj, &mesh.texture, &bg).unwrap();
        for cell in 0..144 {
            if !proj.fg_mask[cell] {
                continue;
            }
            let r = proj.correspondence[cell] as usize;
            let mut tex = mesh.texture.clone();
            for k in 0..3 {
                tex[[r, k]] = map.data[[cell / 12, cell % 12, k]];
            }
            let adjusted = nll(&map, &proj, &tex, &bg).unwrap();
            assert!(adjusted <= base + 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn nll_is_nonnegative(seed in 0u64..500) {
            let mesh = random_mesh(9, [2.0, 1.0, 1.0], 100, 3);
            let cam = CameraIntrinsics::new(10.0, (3.5, 3.5), (8, 8)).unwrap();
            let bg = BackgroundModel::new(vec![0.0; 3], 1.0).unwrap();
            let p = pose(0.5, 0.2, 0.0, 5.0);
            let proj = project(&mesh, &p, &cam).unwrap();
            let map = random_map(seed, 8, 8, 3);
            prop_assert!(nll(&map, &proj, &mesh.texture, &bg).unwrap() >= 0.0);
        }

        #[test]
        fn match_score_is_scale_invariant(alpha in 0.05f64..20.0) {
            let mesh = random_mesh(10, [2.0, 1.0, 1.0], 100, 3);
            let cam = CameraIntrinsics::new(10.0, (3.5, 3.5), (8, 8)).unwrap();
            let p = pose(0.5, 0.2, 0.0, 5.0);
            let proj = project(&mesh, &p, &cam).unwrap();
            let map = random_map(77, 8, 8, 3);
            let s1 = match_score(&map, &proj, &mesh.texture).unwrap();
            let scaled_map = FeatureMap::new(map.data.mapv(|v| v * alpha), Provenance::Extracted).unwrap();
            let scaled_tex = mesh.texture.mapv(|v| v * alpha);
            let s2 = match_score(&scaled_map, &proj, &scaled_tex).unwrap();
            prop_assert!((s1 - s2).abs() < 1e-9);
        }
    }
}
