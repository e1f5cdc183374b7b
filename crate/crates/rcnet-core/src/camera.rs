//! Pose parameterization, rotation construction, pinhole projection onto
//! the feature lattice, and per-vertex visibility.

use crate::error::{Error, Result};
use crate::geom::{drot_x, drot_y, drot_z, rot_x, rot_y, rot_z, Mat3, Vec3};
use crate::mesh::NeuralMeshModel;
use crate::scalar::{real, Real};

/// Default elevation band for pose grids, radians.
pub const DEFAULT_ELEVATION_BAND: (f64, f64) = (-std::f64::consts::PI / 18.0, std::f64::consts::PI / 3.0);
/// Default in-plane rotation band for pose grids, radians.
pub const DEFAULT_THETA_BAND: (f64, f64) = (-std::f64::consts::PI / 6.0, std::f64::consts::PI / 6.0);

/// Camera pose relative to the object: azimuth/elevation/in-plane rotation
/// plus camera-to-object distance. The object sits at the origin; the
/// camera looks at it from `distance` along the rotated optical axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<S: Real = f64> {
    /// [0, 2*pi)
    pub azimuth: S,
    /// [-pi/2, pi/2]
    pub elevation: S,
    /// In-plane rotation, [-pi, pi)
    pub theta: S,
    /// > 0, object units.
    pub distance: S,
}

impl<S: Real> Pose<S> {
    pub fn new(azimuth: S, elevation: S, theta: S, distance: S) -> Result<Self> {
        let p = Pose {
            azimuth,
            elevation,
            theta,
            distance,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let two_pi = real::<S>(std::f64::consts::TAU);
        let half_pi = real::<S>(std::f64::consts::FRAC_PI_2);
        let pi = real::<S>(std::f64::consts::PI);
        let ok = self.azimuth.is_finite()
            && self.elevation.is_finite()
            && self.theta.is_finite()
            && self.distance.is_finite()
            && self.azimuth >= S::zero()
            && self.azimuth < two_pi
            && self.elevation >= -half_pi
            && self.elevation <= half_pi
            && self.theta >= -pi
            && self.theta < pi
            && self.distance > S::zero();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid_argument(format!(
                "pose out of range: az={} el={} theta={} d={}",
                self.azimuth, self.elevation, self.theta, self.distance
            )))
        }
    }

    /// Normalize angles into the canonical ranges, keeping distance as-is.
    pub fn wrapped(azimuth: S, elevation: S, theta: S, distance: S) -> Result<Self> {
        let two_pi = real::<S>(std::f64::consts::TAU);
        let pi = real::<S>(std::f64::consts::PI);
        let half_pi = real::<S>(std::f64::consts::FRAC_PI_2);
        if !(azimuth.is_finite() && elevation.is_finite() && theta.is_finite()) {
            return Err(Error::invalid_argument("non-finite pose angles"));
        }
        let mut az = azimuth % two_pi;
        if az < S::zero() {
            az = az + two_pi;
        }
        if az >= two_pi {
            az = S::zero();
        }
        let el = num_traits::Float::min(num_traits::Float::max(elevation, -half_pi), half_pi);
        let mut th = (theta + pi) % (two_pi);
        if th < S::zero() {
            th = th + two_pi;
        }
        let th = th - pi;
        Pose::new(az, el, th, distance)
    }

    pub fn rotation(&self) -> Mat3<S> {
        rotation_from_pose(self)
    }

    pub fn to_f64(&self) -> Pose<f64> {
        Pose {
            azimuth: self.azimuth.to_f64().unwrap(),
            elevation: self.elevation.to_f64().unwrap(),
            theta: self.theta.to_f64().unwrap(),
            distance: self.distance.to_f64().unwrap(),
        }
    }
}

/// Rotation applied to object coordinates before the camera-frame offset:
/// `R = R_inplane(theta) * R_elev(e) * R_azim(a)`, azimuth about the
/// vertical (y) axis.
pub fn rotation_from_pose<S: Real>(pose: &Pose<S>) -> Mat3<S> {
    rot_z(pose.theta)
        .mul(&rot_x(pose.elevation))
        .mul(&rot_y(pose.azimuth))
}

/// Rotation plus its partial derivatives wrt (azimuth, elevation, theta).
pub fn rotation_derivatives<S: Real>(pose: &Pose<S>) -> (Mat3<S>, [Mat3<S>; 3]) {
    let rz = rot_z(pose.theta);
    let rx = rot_x(pose.elevation);
    let ry = rot_y(pose.azimuth);
    let r = rz.mul(&rx).mul(&ry);
    let d_az = rz.mul(&rx).mul(&drot_y(pose.azimuth));
    let d_el = rz.mul(&drot_x(pose.elevation)).mul(&ry);
    let d_th = drot_z(pose.theta).mul(&rx).mul(&ry);
    (r, [d_az, d_el, d_th])
}

/// Pinhole intrinsics over the feature lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics<S: Real = f64> {
    /// Focal length in lattice cells.
    pub focal: S,
    /// Principal point (u0, v0) in lattice coordinates.
    pub principal: (S, S),
    /// Lattice size (rows H, cols W).
    pub grid: (usize, usize),
}

impl<S: Real> CameraIntrinsics<S> {
    pub fn new(focal: S, principal: (S, S), grid: (usize, usize)) -> Result<Self> {
        if !(focal.is_finite() && focal > S::zero()) {
            return Err(Error::invalid_argument("focal must be positive"));
        }
        if grid.0 == 0 || grid.1 == 0 {
            return Err(Error::invalid_argument("grid must be at least 1x1"));
        }
        if !(principal.0.is_finite() && principal.1.is_finite()) {
            return Err(Error::invalid_argument("principal point not finite"));
        }
        Ok(CameraIntrinsics {
            focal,
            principal,
            grid,
        })
    }

    /// Same camera at `factor` times the lattice resolution.
    pub fn upscaled(&self, factor: usize) -> CameraIntrinsics<S> {
        let f = real::<S>(factor as f64);
        let off = (f - S::one()) / real::<S>(2.0);
        CameraIntrinsics {
            focal: self.focal * f,
            principal: (self.principal.0 * f + off, self.principal.1 * f + off),
            grid: (self.grid.0 * factor, self.grid.1 * factor),
        }
    }
}

/// Projection of a mesh onto the lattice: continuous per-vertex positions,
/// depths, visibility flags, the rendered foreground mask and the
/// per-foreground-pixel nearest-visible-vertex correspondence.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedMesh<S: Real = f64> {
    /// Continuous (u, v) lattice coordinates per vertex (NaN when behind
    /// the camera).
    pub positions: Vec<[S; 2]>,
    pub depths: Vec<S>,
    pub visible: Vec<bool>,
    /// Row-major H*W foreground flags.
    pub fg_mask: Vec<bool>,
    /// Row-major H*W vertex index per foreground pixel; `u32::MAX` on
    /// background pixels.
    pub correspondence: Vec<u32>,
    pub grid: (usize, usize),
}

impl<S: Real> ProjectedMesh<S> {
    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        row * self.grid.1 + col
    }

    pub fn foreground_count(&self) -> usize {
        self.fg_mask.iter().filter(|&&b| b).count()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.visible.len()).filter(|&r| self.visible[r]).collect()
    }
}

/// Minimum camera-frame depth for a vertex to be considered in front.
const MIN_DEPTH: f64 = 1e-6;
/// Depth-buffer tolerance as a fraction of the smallest cuboid extent.
const DEPTH_TOL_FACTOR: f64 = 0.25;

/// Project a mesh under `pose`, resolving visibility with a per-cell depth
/// buffer: a vertex is visible iff no nearer surface point projects within
/// its lattice cell (up to a tolerance scaled by the thinnest extent).
/// The foreground mask is a one-cell dilation of the visible projections.
pub fn project<S: Real>(
    mesh: &NeuralMeshModel<S>,
    pose: &Pose<S>,
    cam: &CameraIntrinsics<S>,
) -> Result<ProjectedMesh<S>> {
    let min_extent = mesh
        .cuboid_dims
        .iter()
        .fold(S::infinity(), |a, &b| num_traits::Float::min(a, b));
    let depth_tol = min_extent * real::<S>(DEPTH_TOL_FACTOR);
    project_points(&mesh.vertices, pose, cam, depth_tol)
}

/// Projection core over a bare vertex list. `depth_tol` controls how much
/// deeper than the front-most point in its cell a vertex may sit while
/// still counting as visible.
pub fn project_points<S: Real>(
    vertices: &[Vec3<S>],
    pose: &Pose<S>,
    cam: &CameraIntrinsics<S>,
    depth_tol: S,
) -> Result<ProjectedMesh<S>> {
    pose.validate()?;
    let (h, w) = cam.grid;
    let r = rotation_from_pose(pose);
    let t = Vec3::new(S::zero(), S::zero(), pose.distance);
    let min_depth = real::<S>(MIN_DEPTH);

    let n = vertices.len();
    let mut positions = vec![[S::nan(), S::nan()]; n];
    let mut depths = vec![S::zero(); n];
    let mut cells = vec![None::<(usize, usize)>; n];

    for (i, v) in vertices.iter().enumerate() {
        let xc = r.mul_vec(v).add(&t);
        let z = xc.z();
        depths[i] = z;
        if z <= min_depth {
            continue;
        }
        let u = cam.focal * xc.x() / z + cam.principal.0;
        let vv = cam.focal * xc.y() / z + cam.principal.1;
        positions[i] = [u, vv];
        let cu = u.round().to_f64().unwrap();
        let cv = vv.round().to_f64().unwrap();
        if cu >= 0.0 && cu < w as f64 && cv >= 0.0 && cv < h as f64 {
            cells[i] = Some((cv as usize, cu as usize));
        }
    }

    // Coarse depth buffer over the vertex cloud.
    let mut buffer = vec![S::infinity(); h * w];
    for i in 0..n {
        if let Some((row, col)) = cells[i] {
            let slot = &mut buffer[row * w + col];
            if depths[i] < *slot {
                *slot = depths[i];
            }
        }
    }

    let mut visible = vec![false; n];
    for i in 0..n {
        if let Some((row, col)) = cells[i] {
            visible[i] = depths[i] <= buffer[row * w + col] + depth_tol;
        }
    }

    // Base mask: cells holding a visible vertex; then one-cell dilation.
    let mut base = vec![false; h * w];
    for i in 0..n {
        if visible[i] {
            let (row, col) = cells[i].unwrap();
            base[row * w + col] = true;
        }
    }
    let mut fg_mask = vec![false; h * w];
    for row in 0..h {
        for col in 0..w {
            if !base[row * w + col] {
                continue;
            }
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let rr = row as i64 + dr;
                    let cc = col as i64 + dc;
                    if rr >= 0 && rr < h as i64 && cc >= 0 && cc < w as i64 {
                        fg_mask[rr as usize * w + cc as usize] = true;
                    }
                }
            }
        }
    }

    let correspondence = nearest_visible(&positions, &visible, &fg_mask, (h, w));

    Ok(ProjectedMesh {
        positions,
        depths,
        visible,
        fg_mask,
        correspondence,
        grid: (h, w),
    })
}

/// Nearest visible vertex (in continuous image space) per foreground cell,
/// ties broken by the lower vertex index. Vertices are bucketed per cell so
/// the search expands in rings instead of scanning every vertex.
fn nearest_visible<S: Real>(
    positions: &[[S; 2]],
    visible: &[bool],
    fg_mask: &[bool],
    grid: (usize, usize),
) -> Vec<u32> {
    let (h, w) = grid;
    let mut corr = vec![u32::MAX; h * w];
    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); h * w];
    let mut any_visible = false;
    for (i, &vis) in visible.iter().enumerate() {
        if !vis {
            continue;
        }
        any_visible = true;
        let col = positions[i][0]
            .round()
            .to_f64()
            .unwrap()
            .clamp(0.0, (w - 1) as f64) as usize;
        let row = positions[i][1]
            .round()
            .to_f64()
            .unwrap()
            .clamp(0.0, (h - 1) as f64) as usize;
        buckets[row * w + col].push(i as u32);
    }
    if !any_visible {
        return corr;
    }

    let max_ring = h.max(w);
    for row in 0..h {
        for col in 0..w {
            if !fg_mask[row * w + col] {
                continue;
            }
            let cx = real::<S>(col as f64);
            let cy = real::<S>(row as f64);
            let mut best: Option<(S, u32)> = None;
            for ring in 0..=max_ring {
                // Once a candidate is found, rings beyond the bound where a
                // closer vertex could still hide can be skipped.
                if let Some((d, _)) = best {
                    let ring_min = real::<S>((ring as f64 - 1.0).max(0.0));
                    if d.sqrt() < ring_min {
                        break;
                    }
                }
                let r0 = row.saturating_sub(ring);
                let r1 = (row + ring).min(h - 1);
                let c0 = col.saturating_sub(ring);
                let c1 = (col + ring).min(w - 1);
                for rr in r0..=r1 {
                    for cc in c0..=c1 {
                        // Only the ring boundary is new.
                        let on_boundary = rr == r0 || rr == r1 || cc == c0 || cc == c1;
                        if ring > 0 && !on_boundary {
                            continue;
                        }
                        for &vi in &buckets[rr * w + cc] {
                            let p = positions[vi as usize];
                            let du = p[0] - cx;
                            let dv = p[1] - cy;
                            let d2 = du * du + dv * dv;
                            let better = match best {
                                None => true,
                                Some((bd, bi)) => d2 < bd || (d2 == bd && vi < bi),
                            };
                            if better {
                                best = Some((d2, vi));
                            }
                        }
                    }
                }
                if ring == max_ring {
                    break;
                }
            }
            corr[row * w + col] = best.expect("foreground cell near a visible vertex").1;
        }
    }
    corr
}

/// Cartesian pose grid used for multi-start initialization: azimuths evenly
/// spaced over [0, 2*pi), elevations and in-plane rotations evenly spaced
/// over their bands.
pub fn pose_grid<S: Real>(
    n_azimuth: usize,
    n_elevation: usize,
    n_theta: usize,
    distance: S,
) -> Result<Vec<Pose<S>>> {
    pose_grid_with_bands(
        n_azimuth,
        n_elevation,
        n_theta,
        distance,
        DEFAULT_ELEVATION_BAND,
        DEFAULT_THETA_BAND,
    )
}

pub fn pose_grid_with_bands<S: Real>(
    n_azimuth: usize,
    n_elevation: usize,
    n_theta: usize,
    distance: S,
    elevation_band: (f64, f64),
    theta_band: (f64, f64),
) -> Result<Vec<Pose<S>>> {
    if n_azimuth == 0 || n_elevation == 0 || n_theta == 0 {
        return Err(Error::invalid_argument("pose grid counts must be >= 1"));
    }
    if !(distance.is_finite() && distance > S::zero()) {
        return Err(Error::invalid_argument("distance must be positive"));
    }
    let azimuths: Vec<S> = (0..n_azimuth)
        .map(|i| real::<S>(std::f64::consts::TAU * i as f64 / n_azimuth as f64))
        .collect();
    let elevations = band_points::<S>(elevation_band, n_elevation);
    let thetas = band_points::<S>(theta_band, n_theta);

    let mut out = Vec::with_capacity(n_azimuth * n_elevation * n_theta);
    for &az in &azimuths {
        for &el in &elevations {
            for &th in &thetas {
                out.push(Pose::new(az, el, th, distance)?);
            }
        }
    }
    Ok(out)
}

/// n points evenly spaced over an inclusive band; a single point sits at
/// the band center.
fn band_points<S: Real>(band: (f64, f64), n: usize) -> Vec<S> {
    if n == 1 {
        return vec![real::<S>((band.0 + band.1) / 2.0)];
    }
    (0..n)
        .map(|i| real::<S>(band.0 + (band.1 - band.0) * i as f64 / (n - 1) as f64))
        .collect()
}

/// Geodesic distance between rotations in radians:
/// `|| log(R_pred^T R_gt) ||_F / sqrt(2)`, computed through the trace with
/// a guarded arccos clamp. Lies in [0, pi].
pub fn pose_error<S: Real>(r_pred: &Mat3<S>, r_gt: &Mat3<S>) -> Result<S> {
    let tol = real::<S>(1e-6);
    if !r_pred.is_rotation(tol) || !r_gt.is_rotation(tol) {
        return Err(Error::invalid_argument("inputs must be rotation matrices"));
    }
    let rel = r_pred.transpose().mul(r_gt);
    let cos = (rel.trace() - S::one()) / real::<S>(2.0);
    let cos = num_traits::Float::min(num_traits::Float::max(cos, -S::one()), S::one());
    Ok(cos.acos())
}
