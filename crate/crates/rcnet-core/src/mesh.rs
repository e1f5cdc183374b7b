//! Cuboid neural meshes: per-class vertex sets with learnable per-vertex
//! feature vectors (the neural texture), plus the shared background
//! appearance model and the bank bundling all classes together.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::scalar::{real, Real};
use crate::training::FeatureExtractor;

/// Tolerance for the on-surface vertex invariant.
const SURFACE_TOL: f64 = 1e-9;

/// One object category: cuboid vertices plus a feature vector per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralMeshModel<S: Real = f64> {
    pub class_id: usize,
    pub vertices: Vec<Vec3<S>>,
    /// R x c, row r is the texture of vertex r.
    pub texture: Array2<S>,
    pub cuboid_dims: [S; 3],
}

impl<S: Real> NeuralMeshModel<S> {
    pub fn new(
        class_id: usize,
        vertices: Vec<Vec3<S>>,
        texture: Array2<S>,
        cuboid_dims: [S; 3],
    ) -> Result<Self> {
        let model = NeuralMeshModel {
            class_id,
            vertices,
            texture,
            cuboid_dims,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.texture.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.is_empty() {
            return Err(Error::invalid_state("mesh has no vertices"));
        }
        if self.texture.nrows() != self.vertices.len() {
            return Err(Error::invalid_state(format!(
                "texture rows {} != vertex count {}",
                self.texture.nrows(),
                self.vertices.len()
            )));
        }
        for (i, &d) in self.cuboid_dims.iter().enumerate() {
            if !(d.is_finite() && d > S::zero()) {
                return Err(Error::invalid_state(format!(
                    "cuboid extent {i} must be positive"
                )));
            }
        }
        let tol = real::<S>(SURFACE_TOL);
        for (r, v) in self.vertices.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::invalid_state(format!("vertex {r} not finite")));
            }
            let on_surface = (0..3).any(|a| {
                let half = self.cuboid_dims[a] / real::<S>(2.0);
                (v.0[a].abs() - half).abs() <= tol
            });
            if !on_surface {
                return Err(Error::invalid_state(format!(
                    "vertex {r} not on the cuboid surface"
                )));
            }
        }
        if self.texture.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid_state("texture has non-finite entries"));
        }
        Ok(())
    }

    /// Arithmetic mean of the texture rows.
    pub fn texture_class_mean(&self) -> Result<Vec<S>> {
        texture_mean(&self.texture)
    }

    /// Snap all stored values to `f32` so persistence round-trips bit-exactly.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.vertices {
            for c in &mut v.0 {
                *c = c.snap_f32();
            }
        }
        self.texture.mapv_inplace(Real::snap_f32);
        for d in &mut self.cuboid_dims {
            *d = d.snap_f32();
        }
    }
}

/// Mean of texture rows; errors on an empty texture.
pub fn texture_mean<S: Real>(texture: &Array2<S>) -> Result<Vec<S>> {
    let r = texture.nrows();
    if r == 0 {
        return Err(Error::invalid_state("empty texture"));
    }
    let inv = S::one() / real::<S>(r as f64);
    let mut mean = vec![S::zero(); texture.ncols()];
    for row in texture.rows() {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m = *m + v;
        }
    }
    for m in &mut mean {
        *m = *m * inv;
    }
    Ok(mean)
}

/// Gaussian background appearance: all off-mesh lattice positions are
/// modelled as `N(mean, sigma^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundModel<S: Real = f64> {
    pub mean: Vec<S>,
    pub sigma: S,
}

impl<S: Real> BackgroundModel<S> {
    pub fn new(mean: Vec<S>, sigma: S) -> Result<Self> {
        let bg = BackgroundModel { mean, sigma };
        bg.validate()?;
        Ok(bg)
    }

    pub fn zeros(dim: usize) -> Self {
        BackgroundModel {
            mean: vec![S::zero(); dim],
            sigma: S::one(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > S::zero()) {
            return Err(Error::invalid_state("background sigma must be positive"));
        }
        if self.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_state("background mean not finite"));
        }
        Ok(())
    }

    pub fn quantize_f32(&mut self) {
        for v in &mut self.mean {
            *v = v.snap_f32();
        }
        self.sigma = self.sigma.snap_f32();
    }
}

/// Current model file format version.
pub const FORMAT_VERSION: u32 = 1;

/// All class meshes plus the shared background model and feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBank<S: Real = f64> {
    pub models: Vec<NeuralMeshModel<S>>,
    pub background: BackgroundModel<S>,
    pub extractor: FeatureExtractor<S>,
    pub format_version: u32,
    /// Epochs of training already applied (used when resuming).
    pub trained_epochs: u32,
}

impl<S: Real> ModelBank<S> {
    /// Fresh bank with deterministic random textures and extractor weights.
    pub fn initialize(
        class_dims: &[[f64; 3]],
        target_vertices: usize,
        feature_dim: usize,
        extractor: FeatureExtractor<S>,
        seed: u64,
    ) -> Result<Self> {
        if class_dims.is_empty() {
            return Err(Error::invalid_argument("at least one class required"));
        }
        if extractor.out_dim() != feature_dim {
            return Err(Error::invalid_argument(format!(
                "extractor output dim {} != feature dim {}",
                extractor.out_dim(),
                feature_dim
            )));
        }
        let mut models = Vec::with_capacity(class_dims.len());
        for (class_id, dims) in class_dims.iter().enumerate() {
            let dims_s = [real::<S>(dims[0]), real::<S>(dims[1]), real::<S>(dims[2])];
            let vertices = build_cuboid(dims_s, target_vertices)?;
            let mut rng = crate::seeds::rng(seed, "texture-init", class_id as u64);
            let texture = init_textures(vertices.len(), feature_dim, &mut rng)?;
            models.push(NeuralMeshModel::new(class_id, vertices, texture, dims_s)?);
        }
        let mut bank = ModelBank {
            models,
            background: BackgroundModel::zeros(feature_dim),
            extractor,
            format_version: FORMAT_VERSION,
            trained_epochs: 0,
        };
        bank.quantize_f32();
        bank.validate()?;
        Ok(bank)
    }

    pub fn class_count(&self) -> usize {
        self.models.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.models.first().map_or(0, |m| m.feature_dim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::invalid_state("bank has no class models"));
        }
        let c = self.feature_dim();
        for (i, m) in self.models.iter().enumerate() {
            if m.class_id != i {
                return Err(Error::invalid_state(format!(
                    "class ids must be contiguous: slot {i} holds id {}",
                    m.class_id
                )));
            }
            if m.feature_dim() != c {
                return Err(Error::invalid_state("texture dims differ across classes"));
            }
            m.validate()?;
        }
        if self.background.mean.len() != c {
            return Err(Error::invalid_state(
                "background dim != texture feature dim",
            ));
        }
        self.background.validate()?;
        if self.extractor.out_dim() != c {
            return Err(Error::invalid_state("extractor output dim != texture dim"));
        }
        Ok(())
    }

    pub fn quantize_f32(&mut self) {
        for m in &mut self.models {
            m.quantize_f32();
        }
        self.background.quantize_f32();
        self.extractor.quantize_f32();
    }
}

/// Sample vertices on the surface of an axis-aligned cuboid centred at the
/// origin, with near-uniform surface density and all eight corners included.
///
/// Vertices are placed on per-face regular grids whose pitch is derived from
/// total surface area / target count; grids include face borders, shared
/// border points are deduplicated exactly, and the result is sorted
/// lexicographically so equal inputs always yield the identical list.
pub fn build_cuboid<S: Real>(dims: [S; 3], target_vertex_count: usize) -> Result<Vec<Vec3<S>>> {
    for (i, &d) in dims.iter().enumerate() {
        if !(d.is_finite() && d > S::zero()) {
            return Err(Error::invalid_argument(format!(
                "cuboid extent {i} must be positive and finite"
            )));
        }
    }
    if target_vertex_count < 8 {
        return Err(Error::invalid_argument(
            "target vertex count must be at least 8",
        ));
    }

    let d = [
        dims[0].to_f64().unwrap(),
        dims[1].to_f64().unwrap(),
        dims[2].to_f64().unwrap(),
    ];
    let total_area = 2.0 * (d[0] * d[1] + d[0] * d[2] + d[1] * d[2]);
    let target = target_vertex_count as f64;

    let mut pitch = (total_area / target).sqrt();
    let mut best: Option<(usize, Vec<Vec3<S>>)> = None;
    for _ in 0..32 {
        let verts = sample_faces(&dims, pitch);
        let count = verts.len();
        let closer = best
            .as_ref()
            .is_none_or(|(bc, _)| count.abs_diff(target_vertex_count) < bc.abs_diff(target_vertex_count));
        if closer {
            best = Some((count, verts));
        }
        let err = (count as f64 - target) / target;
        if err.abs() <= 0.10 {
            break;
        }
        // Count scales roughly with 1/pitch^2; damped correction.
        pitch *= (count as f64 / target).sqrt().clamp(0.5, 2.0);
    }

    let (_, mut verts) = best.expect("at least one sampling attempt");
    verts.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("cuboid vertices are always finite")
    });
    Ok(verts)
}

/// Place grid points on all six faces for a given pitch and deduplicate
/// shared border points by exact bit equality.
fn sample_faces<S: Real>(dims: &[S; 3], pitch: f64) -> Vec<Vec3<S>> {
    use std::collections::BTreeSet;

    let half = [
        dims[0] / real::<S>(2.0),
        dims[1] / real::<S>(2.0),
        dims[2] / real::<S>(2.0),
    ];
    let mut seen: BTreeSet<[u64; 3]> = BTreeSet::new();
    let mut out = Vec::new();

    for normal_axis in 0..3 {
        let u_axis = (normal_axis + 1) % 3;
        let v_axis = (normal_axis + 2) % 3;
        let n_u = grid_points(dims[u_axis].to_f64().unwrap(), pitch);
        let n_v = grid_points(dims[v_axis].to_f64().unwrap(), pitch);
        for &sign in &[S::one(), -S::one()] {
            for iu in 0..n_u {
                for iv in 0..n_v {
                    let mut coords = [S::zero(); 3];
                    coords[normal_axis] = half[normal_axis] * sign;
                    coords[u_axis] = linspace_point(half[u_axis], n_u, iu);
                    coords[v_axis] = linspace_point(half[v_axis], n_v, iv);
                    let key = [
                        coords[0].to_f64().unwrap().to_bits(),
                        coords[1].to_f64().unwrap().to_bits(),
                        coords[2].to_f64().unwrap().to_bits(),
                    ];
                    if seen.insert(key) {
                        out.push(Vec3(coords));
                    }
                }
            }
        }
    }
    out
}

fn grid_points(extent: f64, pitch: f64) -> usize {
    ((extent / pitch).round() as usize + 1).max(2)
}

/// i-th of n points spanning [-half, half]; endpoints are exact so border
/// points coincide bit-for-bit across adjacent faces.
fn linspace_point<S: Real>(half: S, n: usize, i: usize) -> S {
    if i == 0 {
        -half
    } else if i == n - 1 {
        half
    } else {
        let step = (half + half) / real::<S>((n - 1) as f64);
        -half + step * real::<S>(i as f64)
    }
}

/// Unit-norm random texture rows; bitwise deterministic for a fixed rng.
pub fn init_textures<S: Real>(
    vertex_count: usize,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<Array2<S>> {
    if vertex_count == 0 {
        return Err(Error::invalid_argument("vertex count must be positive"));
    }
    if dim == 0 {
        return Err(Error::invalid_argument("texture dim must be positive"));
    }
    let mut out = Array2::zeros((vertex_count, dim));
    for mut row in out.rows_mut() {
        loop {
            let mut buf = vec![0.0f64; dim];
            for v in &mut buf {
                *v = StandardNormal.sample(rng);
            }
            let norm = buf.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for (o, v) in row.iter_mut().zip(&buf) {
                    *o = real::<S>(v / norm);
                }
                break;
            }
        }
    }
    Ok(out)
}
