//! Procedural ground-truth world.
//!
//! Every image is a colored glyph built from a few Gaussian blobs. Identity
//! is the discrete tuple (shape, palette, scale); pose is an in-plane
//! rotation plus a translation. Because each glyph is symmetric about both
//! of its axes and elongated along x, pose and identity can be read back
//! from pixels with image moments:
//!
//! * centroid of the ink mass gives the translation,
//! * the principal axis of the second moments gives the rotation,
//! * rotation/translation invariants (ink per channel, radius of gyration,
//!   anisotropy, fourth-order invariants) characterise the identity.
//!
//! The moment readers are written with differentiable tensor ops so they can
//! also serve as frozen auxiliary networks during GAN training.
//!
//! Coordinates: pixel `(row i, col j)` sits at
//! `x = (j + 0.5 - R/2) / (R/2)`, `y = (i + 0.5 - R/2) / (R/2)`, so the
//! image spans `(-1, 1)` in both axes.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::image::ImageBatch;
use crate::ops;

/// One Gaussian blob in glyph coordinates.
#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    sx: f64,
    sy: f64,
    amp: f64,
}

const fn blob(cx: f64, cy: f64, sx: f64, sy: f64, amp: f64) -> Blob {
    Blob { cx, cy, sx, sy, amp }
}

// Each glyph is mirror-symmetric in x and y, has its major axis along x and
// amplitudes summing to one, so the density never exceeds one.
const SHAPES: [&[Blob]; 8] = [
    &[blob(0.0, 0.0, 0.20, 0.11, 1.0)],
    &[blob(-0.26, 0.0, 0.10, 0.10, 0.5), blob(0.26, 0.0, 0.10, 0.10, 0.5)],
    &[
        blob(-0.30, 0.0, 0.09, 0.09, 1.0 / 3.0),
        blob(0.0, 0.0, 0.09, 0.09, 1.0 / 3.0),
        blob(0.30, 0.0, 0.09, 0.09, 1.0 / 3.0),
    ],
    &[
        blob(-0.28, 0.0, 0.09, 0.09, 0.3),
        blob(0.28, 0.0, 0.09, 0.09, 0.3),
        blob(0.0, -0.13, 0.085, 0.085, 0.2),
        blob(0.0, 0.13, 0.085, 0.085, 0.2),
    ],
    &[
        blob(-0.24, -0.12, 0.085, 0.085, 0.25),
        blob(0.24, -0.12, 0.085, 0.085, 0.25),
        blob(-0.24, 0.12, 0.085, 0.085, 0.25),
        blob(0.24, 0.12, 0.085, 0.085, 0.25),
    ],
    &[
        blob(-0.30, 0.0, 0.09, 0.09, 0.2),
        blob(0.30, 0.0, 0.09, 0.09, 0.2),
        blob(-0.13, -0.12, 0.085, 0.085, 0.15),
        blob(0.13, -0.12, 0.085, 0.085, 0.15),
        blob(-0.13, 0.12, 0.085, 0.085, 0.15),
        blob(0.13, 0.12, 0.085, 0.085, 0.15),
    ],
    &[
        blob(0.0, 0.0, 0.13, 0.09, 0.5),
        blob(-0.34, 0.0, 0.085, 0.085, 0.25),
        blob(0.34, 0.0, 0.085, 0.085, 0.25),
    ],
    &[blob(0.0, 0.0, 0.19, 0.14, 1.0)],
];

const PALETTES: [[f64; 3]; 8] = [
    [1.0, 0.25, 0.2],
    [0.2, 0.9, 0.3],
    [0.25, 0.35, 1.0],
    [1.0, 0.85, 0.2],
    [0.9, 0.3, 0.9],
    [0.2, 0.9, 0.9],
    [0.95, 0.95, 0.95],
    [1.0, 0.55, 0.1],
];

const SCALES: [f64; 4] = [0.75, 0.87, 1.0, 1.12];

pub const N_SHAPES: usize = SHAPES.len();
pub const N_PALETTES: usize = PALETTES.len();
pub const N_SCALES: usize = SCALES.len();
/// Size of the identity factor space.
pub const N_IDENTITIES: usize = N_SHAPES * N_PALETTES * N_SCALES;
/// Length of the pose-invariant feature vector behind the oracle embedding.
pub const N_FEATURES: usize = 7;

/// Offset appended to the standardized features before embedding; keeps
/// feature vectors that are scalar multiples of each other apart.
const FEATURE_BIAS: f64 = 0.5;
const MASS_EPS: f64 = 1e-6;

/// Discrete identity factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IdentityFactors {
    pub shape: u8,
    pub palette: u8,
    pub scale: u8,
}

impl IdentityFactors {
    pub fn from_index(index: usize) -> Result<Self> {
        if index >= N_IDENTITIES {
            return Err(arg_err!("identity index {index} outside [0, {N_IDENTITIES})"));
        }
        Ok(Self {
            shape: (index / (N_PALETTES * N_SCALES)) as u8,
            palette: ((index / N_SCALES) % N_PALETTES) as u8,
            scale: (index % N_SCALES) as u8,
        })
    }

    pub fn index(&self) -> usize {
        (self.shape as usize * N_PALETTES + self.palette as usize) * N_SCALES + self.scale as usize
    }

    fn validate(&self) -> Result<()> {
        if self.shape as usize >= N_SHAPES
            || self.palette as usize >= N_PALETTES
            || self.scale as usize >= N_SCALES
        {
            return Err(arg_err!("identity factors {self:?} outside the factor space"));
        }
        Ok(())
    }
}

/// Continuous pose factors: rotation in radians, shifts as fractions of the
/// world's maximum translation (so each lies in `[-1, 1]`).
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseFactors {
    pub rotation: f64,
    pub shift_x: f64,
    pub shift_y: f64,
}

impl PoseFactors {
    pub fn new(rotation: f64, shift_x: f64, shift_y: f64) -> Self {
        Self {
            rotation,
            shift_x,
            shift_y,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.rotation, self.shift_x, self.shift_y]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleWorldSpec {
    pub resolution: usize,
    /// Largest rotation magnitude, radians. Must stay below pi/4 so the
    /// principal-axis reading is unambiguous.
    pub max_rotation: f64,
    /// Largest translation, in image half-widths.
    pub max_shift: f64,
    /// Dimension of the oracle identity embedding.
    pub embed_dim: usize,
    /// Seed of the fixed embedding projection.
    pub seed: u64,
}

impl Default for OracleWorldSpec {
    fn default() -> Self {
        Self {
            resolution: 32,
            max_rotation: 0.6,
            max_shift: 0.15,
            embed_dim: 32,
            seed: 0,
        }
    }
}

/// The oracle world: renderer plus moment-based identity and pose readers.
#[derive(Clone, Debug)]
pub struct OracleWorld {
    spec: OracleWorldSpec,
    feature_mean: [f64; N_FEATURES],
    feature_std: [f64; N_FEATURES],
    /// `[N_FEATURES + 1, embed_dim]`, orthonormal rows.
    projection: Vec<f64>,
}

/// Raw moment statistics of a batch.
struct Moments {
    ink: Tensor,
    cx: Tensor,
    cy: Tensor,
    mu20: Tensor,
    mu02: Tensor,
    mu11: Tensor,
    r4: Tensor,
    re4: Tensor,
    im4: Tensor,
}

impl OracleWorld {
    pub fn new(spec: OracleWorldSpec) -> Result<Self> {
        if spec.resolution < 8 || spec.resolution % 2 != 0 {
            return Err(arg_err!("oracle resolution must be even and at least 8"));
        }
        if !(spec.max_rotation > 0.0 && spec.max_rotation < std::f64::consts::FRAC_PI_4) {
            return Err(arg_err!("max_rotation must lie in (0, pi/4)"));
        }
        if !(spec.max_shift > 0.0 && spec.max_shift < 0.3) {
            return Err(arg_err!("max_shift must lie in (0, 0.3)"));
        }
        if spec.embed_dim < N_FEATURES + 1 {
            return Err(arg_err!("embed_dim must be at least {}", N_FEATURES + 1));
        }
        let projection = orthonormal_rows(N_FEATURES + 1, spec.embed_dim, spec.seed);
        let mut world = Self {
            spec,
            feature_mean: [0.0; N_FEATURES],
            feature_std: [1.0; N_FEATURES],
            projection,
        };
        let all: Vec<(IdentityFactors, PoseFactors)> = (0..N_IDENTITIES)
            .map(|i| (IdentityFactors::from_index(i).unwrap(), PoseFactors::default()))
            .collect();
        let images = world.render_batch(&all)?;
        let feats: Vec<Vec<f64>> = world
            .features(&images.to_f64()?)?
            .to_vec2::<f64>()?;
        for k in 0..N_FEATURES {
            let col: Vec<f64> = feats.iter().map(|r| r[k]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            world.feature_mean[k] = mean;
            world.feature_std[k] = var.sqrt().max(1e-9);
        }
        Ok(world)
    }

    pub fn spec(&self) -> &OracleWorldSpec {
        &self.spec
    }

    pub fn resolution(&self) -> usize {
        self.spec.resolution
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    pub fn all_identities() -> Vec<IdentityFactors> {
        (0..N_IDENTITIES)
            .map(|i| IdentityFactors::from_index(i).unwrap())
            .collect()
    }

    pub fn sample_pose<R: Rng>(&self, rng: &mut R) -> PoseFactors {
        PoseFactors {
            rotation: rng.random_range(-self.spec.max_rotation..=self.spec.max_rotation),
            shift_x: rng.random_range(-1.0..=1.0),
            shift_y: rng.random_range(-1.0..=1.0),
        }
    }

    pub fn sample_identity<R: Rng>(rng: &mut R) -> IdentityFactors {
        IdentityFactors::from_index(rng.random_range(0..N_IDENTITIES)).unwrap()
    }

    fn validate_pose(&self, pose: &PoseFactors) -> Result<()> {
        let tol = 1e-12;
        if !pose.rotation.is_finite()
            || pose.rotation.abs() > self.spec.max_rotation + tol
            || !(pose.shift_x.abs() <= 1.0 + tol)
            || !(pose.shift_y.abs() <= 1.0 + tol)
        {
            return Err(arg_err!(
                "pose {pose:?} outside rotation +/-{} and shift +/-1",
                self.spec.max_rotation
            ));
        }
        Ok(())
    }

    /// Renders one image, channel-last, into `out` (`R * R * 3` values).
    fn render_into(&self, id: &IdentityFactors, pose: &PoseFactors, out: &mut [f32]) {
        let r = self.spec.resolution;
        let half = r as f64 / 2.0;
        let shape = SHAPES[id.shape as usize];
        let color = PALETTES[id.palette as usize];
        let s = SCALES[id.scale as usize];
        let (sin, cos) = pose.rotation.sin_cos();
        let tx = pose.shift_x * self.spec.max_shift;
        let ty = pose.shift_y * self.spec.max_shift;
        for i in 0..r {
            let y = (i as f64 + 0.5 - half) / half;
            for j in 0..r {
                let x = (j as f64 + 0.5 - half) / half;
                // Undo translation, rotation and scale to land in glyph coordinates.
                let (ux, uy) = (x - tx, y - ty);
                let gx = (cos * ux + sin * uy) / s;
                let gy = (-sin * ux + cos * uy) / s;
                let mut d = 0.0;
                for b in shape {
                    let ex = (gx - b.cx) / b.sx;
                    let ey = (gy - b.cy) / b.sy;
                    d += b.amp * (-0.5 * (ex * ex + ey * ey)).exp();
                }
                let base = (i * r + j) * 3;
                for c in 0..3 {
                    out[base + c] = (-1.0 + 2.0 * color[c] * d) as f32;
                }
            }
        }
    }

    /// Deterministic render of one identity at one pose, `[1, 3, R, R]`.
    pub fn render(&self, id: &IdentityFactors, pose: &PoseFactors) -> Result<ImageBatch> {
        self.render_batch(&[(*id, *pose)])
    }

    pub fn render_batch(&self, items: &[(IdentityFactors, PoseFactors)]) -> Result<ImageBatch> {
        if items.is_empty() {
            return Err(arg_err!("nothing to render"));
        }
        let r = self.spec.resolution;
        let per = r * r * 3;
        let mut data = vec![0f32; items.len() * per];
        for ((id, pose), chunk) in items.iter().zip(data.chunks_mut(per)) {
            id.validate()?;
            self.validate_pose(pose)?;
            self.render_into(id, pose, chunk);
        }
        let t = Tensor::from_vec(data, (items.len(), r, r, 3), &Device::Cpu)?;
        ImageBatch::from_nhwc(&t)
    }

    fn grids(&self, dtype: DType) -> Result<(Tensor, Tensor)> {
        let r = self.spec.resolution;
        let half = r as f64 / 2.0;
        let coords: Vec<f64> = (0..r).map(|k| (k as f64 + 0.5 - half) / half).collect();
        let xs = Tensor::from_vec(coords.clone(), (1, 1, r), &Device::Cpu)?
            .broadcast_as((1, r, r))?
            .contiguous()?
            .to_dtype(dtype)?;
        let ys = Tensor::from_vec(coords, (1, r, 1), &Device::Cpu)?
            .broadcast_as((1, r, r))?
            .contiguous()?
            .to_dtype(dtype)?;
        Ok((xs, ys))
    }

    fn moments(&self, images: &ImageBatch) -> Result<Moments> {
        images.expect_shape(3, self.spec.resolution)?;
        let p = images.pixels();
        let dtype = p.dtype();
        let (xs, ys) = self.grids(dtype)?;
        let area = (self.spec.resolution as f64 / 2.0).powi(2);
        // (v + 1) / 2 recovers color * density for every channel.
        let dens = p.affine(0.5, 0.5)?;
        let ink = dens.sum((2, 3))?.affine(1.0 / area, 0.0)?;
        let m = dens.mean(1)?;
        let m0 = m.sum((1, 2))?.affine(1.0, MASS_EPS)?;
        let wmean = |f: &Tensor| -> Result<Tensor> { Ok(m.broadcast_mul(f)?.sum((1, 2))?.div(&m0)?) };
        let cx = wmean(&xs)?;
        let cy = wmean(&ys)?;
        let dx = xs.broadcast_sub(&cx.unsqueeze(1)?.unsqueeze(2)?)?;
        let dy = ys.broadcast_sub(&cy.unsqueeze(1)?.unsqueeze(2)?)?;
        let dx2 = dx.sqr()?;
        let dy2 = dy.sqr()?;
        let dxdy = (&dx * &dy)?;
        let mu20 = wmean(&dx2)?;
        let mu02 = wmean(&dy2)?;
        let mu11 = wmean(&dxdy)?;
        let r2 = (&dx2 + &dy2)?;
        let r4 = wmean(&r2.sqr()?)?;
        // Re/Im of (dx + i dy)^4.
        let re = ((dx2.sqr()? + dy2.sqr()?)? - (&dx2 * &dy2)?.affine(6.0, 0.0)?)?;
        let im = (&dxdy * (&dx2 - &dy2)?)?.affine(4.0, 0.0)?;
        let re4 = wmean(&re)?;
        let im4 = wmean(&im)?;
        Ok(Moments {
            ink,
            cx,
            cy,
            mu20,
            mu02,
            mu11,
            r4,
            re4,
            im4,
        })
    }

    /// Pose readout `[B, 3]`: (rotation rad, shift_x, shift_y), shifts in
    /// units of the maximum translation.
    pub fn pose_tensor(&self, images: &ImageBatch) -> Result<Tensor> {
        let m = self.moments(images)?;
        let rot = ops::atan2_damped(
            &m.mu11.affine(2.0, 0.0)?,
            &(&m.mu20 - &m.mu02)?,
            1e-8,
        )?
        .affine(0.5, 0.0)?;
        let inv = 1.0 / self.spec.max_shift;
        Ok(Tensor::stack(
            &[rot, m.cx.affine(inv, 0.0)?, m.cy.affine(inv, 0.0)?],
            1,
        )?)
    }

    /// Pose-invariant identity features `[B, N_FEATURES]`, unstandardized.
    pub fn features(&self, images: &ImageBatch) -> Result<Tensor> {
        let m = self.moments(images)?;
        let size = (&m.mu20 + &m.mu02)?;
        let size2 = size.sqr()?.affine(1.0, 1e-12)?;
        let aniso = ((&m.mu20 - &m.mu02)?.sqr()? + m.mu11.sqr()?.affine(4.0, 0.0)?)?
            .affine(1.0, 1e-12)?
            .sqrt()?
            .div(&size.affine(1.0, 1e-9)?)?;
        let kurt = m.r4.div(&size2)?;
        let four = (m.re4.sqr()? + m.im4.sqr()?)?
            .affine(1.0, 1e-12)?
            .sqrt()?
            .div(&size2)?;
        let scalars = Tensor::stack(&[size, aniso, kurt, four], 1)?;
        Ok(Tensor::cat(&[&m.ink, &scalars], 1)?)
    }

    /// Unit-norm identity embedding `[B, embed_dim]`.
    pub fn embed_tensor(&self, images: &ImageBatch) -> Result<Tensor> {
        let f = self.features(images)?;
        let dtype = f.dtype();
        let b = f.dim(0)?;
        let mean = Tensor::new(&self.feature_mean[..], &Device::Cpu)?.to_dtype(dtype)?;
        let std = Tensor::new(&self.feature_std[..], &Device::Cpu)?.to_dtype(dtype)?;
        let z = f.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let bias = Tensor::full(FEATURE_BIAS, (b, 1), &Device::Cpu)?.to_dtype(dtype)?;
        let z = Tensor::cat(&[&z, &bias], 1)?;
        let proj = Tensor::from_vec(
            self.projection.clone(),
            (N_FEATURES + 1, self.spec.embed_dim),
            &Device::Cpu,
        )?
        .to_dtype(dtype)?;
        Ok(ops::l2_normalize(&z.matmul(&proj)?)?)
    }

    /// Nearest identity (by embedding angle) for each image.
    pub fn identify(&self, images: &ImageBatch) -> Result<Vec<IdentityFactors>> {
        let refs: Vec<(IdentityFactors, PoseFactors)> = Self::all_identities()
            .into_iter()
            .map(|id| (id, PoseFactors::default()))
            .collect();
        let ref_emb = self.embed_tensor(&self.render_batch(&refs)?.to_f64()?)?;
        let emb = self.embed_tensor(&images.to_f64()?)?;
        let sims = emb.matmul(&ref_emb.t()?)?;
        let best: Vec<u32> = sims.argmax(D::Minus1)?.to_vec1()?;
        best.into_iter()
            .map(|i| IdentityFactors::from_index(i as usize))
            .collect()
    }
}

impl ImageBatch {
    pub fn to_f64(&self) -> Result<ImageBatch> {
        ImageBatch::new(self.pixels().to_dtype(DType::F64)?)
    }
}

/// `rows x cols` matrix with orthonormal rows (Gram-Schmidt on Gaussians).
fn orthonormal_rows(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f72_6163_6c65);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while out.len() < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
        for u in &out {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (a, b) in v.iter_mut().zip(u) {
                *a -= dot * b;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    out.into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> OracleWorld {
        OracleWorld::new(OracleWorldSpec::default()).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn identity_index_round_trips() {
        for i in 0..N_IDENTITIES {
            assert_eq!(IdentityFactors::from_index(i).unwrap().index(), i);
        }
        assert!(IdentityFactors::from_index(N_IDENTITIES).is_err());
    }

    #[test]
    fn rendering_is_deterministic_and_in_range() {
        let w = world();
        let id = IdentityFactors::from_index(77).unwrap();
        let pose = PoseFactors::new(0.3, -0.5, 0.8);
        let a = w.render(&id, &pose).unwrap();
        let b = w.render(&id, &pose).unwrap();
        assert_eq!(max_abs_diff(a.pixels(), b.pixels()), 0.0);
        let v: Vec<f32> = a.pixels().flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn rejects_out_of_range_factors() {
        let w = world();
        let bad_id = IdentityFactors {
            shape: N_SHAPES as u8,
            palette: 0,
            scale: 0,
        };
        assert!(w.render(&bad_id, &PoseFactors::default()).is_err());
        let id = IdentityFactors::from_index(0).unwrap();
        assert!(w.render(&id, &PoseFactors::new(1.0, 0.0, 0.0)).is_err());
        assert!(w.render(&id, &PoseFactors::new(0.0, 1.5, 0.0)).is_err());
        assert!(w.render(&id, &PoseFactors::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn pose_readback_at_the_origin_is_zero() {
        let w = world();
        for i in [0, 37, 130, 255] {
            let id = IdentityFactors::from_index(i).unwrap();
            let img = w.render(&id, &PoseFactors::default()).unwrap().to_f64().unwrap();
            let p: Vec<Vec<f64>> = w.pose_tensor(&img).unwrap().to_vec2().unwrap();
            for v in &p[0] {
                assert!(v.abs() < 1e-9, "identity {i}: {:?}", p[0]);
            }
        }
    }

    #[test]
    fn pose_readback_recovers_factors_for_every_identity() {
        let w = world();
        let pose = PoseFactors::new(0.1, -0.2, 0.3);
        let items: Vec<_> = OracleWorld::all_identities().into_iter().map(|id| (id, pose)).collect();
        let imgs = w.render_batch(&items).unwrap().to_f64().unwrap();
        let p: Vec<Vec<f64>> = w.pose_tensor(&imgs).unwrap().to_vec2().unwrap();
        let worst = p
            .iter()
            .flat_map(|row| row.iter().zip(pose.as_array()).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        assert!(worst < 1e-3, "worst pose error {worst}");
    }

    #[test]
    fn features_are_pose_invariant() {
        let w = world();
        let id = IdentityFactors::from_index(201).unwrap();
        let a = w.render(&id, &PoseFactors::default()).unwrap().to_f64().unwrap();
        let b = w.render(&id, &PoseFactors::new(-0.55, 0.9, -1.0)).unwrap().to_f64().unwrap();
        let ea = w.embed_tensor(&a).unwrap();
        let eb = w.embed_tensor(&b).unwrap();
        let cos = (ea * eb).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(cos > 1.0 - 1e-6, "cos {cos}");
    }

    #[test]
    fn identify_reads_back_identity_across_poses() {
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let items: Vec<_> = (0..40)
            .map(|_| (OracleWorld::sample_identity(&mut rng), w.sample_pose(&mut rng)))
            .collect();
        let imgs = w.render_batch(&items).unwrap();
        let got = w.identify(&imgs).unwrap();
        for ((id, _), g) in items.iter().zip(got) {
            assert_eq!(*id, g);
        }
    }
}
