use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{center_rows, Dataset};
use crate::diffcore::Mat;
use crate::error::{Error, Result};
use crate::model::{random_rotation_rows, Camera, Frame2D, Shape3D};

/// Coefficient of the first basis shape in every frame.
pub const MEAN_SHAPE_WEIGHT: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub points: usize,
    pub frames: usize,
    pub bases: usize,
    pub camera_seed: u64,
    pub shape_seed: u64,
    pub noise_ratio: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            points: 20,
            frames: 800,
            bases: 3,
            camera_seed: 0,
            shape_seed: 0,
            noise_ratio: 0.0,
        }
    }
}

/// `K` basis shapes (`3×P`, centered) and per-frame coefficients (`F×K`).
#[derive(Clone, Debug, PartialEq)]
pub struct BasisModel {
    pub bases: Vec<Mat>,
    pub coefficients: Mat,
}

impl BasisModel {
    /// `Σ_k c_{ik} B_k`.
    pub fn shape(&self, i: usize) -> Mat {
        let (p, k) = (self.bases[0].cols(), self.bases.len());
        Mat::from_fn(3, p, |r, c| {
            (0..k)
                .map(|j| self.coefficients.get(i, j) * self.bases[j].get(r, c))
                .sum()
        })
    }
}

/// Synthesized dataset with the generating cameras and basis.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub cameras: Vec<Camera>,
    pub basis: BasisModel,
}

/// Low-rank deformable shapes seen through uniformly random orthographic
/// cameras, with optional Gaussian noise.
pub fn synthesize(cfg: &SynthConfig) -> Result<Synthetic> {
    let SynthConfig {
        points: p,
        frames: f,
        bases: k,
        ..
    } = *cfg;
    if k == 0 || f <= k || p < 4 {
        return Err(Error::Config(format!(
            "synthesis needs K >= 1, F > K, P >= 4 (got K = {k}, F = {f}, P = {p})"
        )));
    }
    let mut shape_rng = ChaCha8Rng::seed_from_u64(cfg.shape_seed);
    let mut camera_rng = ChaCha8Rng::seed_from_u64(cfg.camera_seed);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let bases: Vec<Mat> = (0..k)
        .map(|_| center_rows(&Mat::from_fn(3, p, |_, _| gauss(&mut shape_rng))))
        .collect();
    let coefficients = Mat::from_fn(f, k, |_, j| {
        let z = gauss(&mut shape_rng);
        if j == 0 {
            MEAN_SHAPE_WEIGHT
        } else {
            z
        }
    });
    let basis = BasisModel {
        bases,
        coefficients,
    };

    let mut frames = Vec::with_capacity(f);
    let mut gt = Vec::with_capacity(f);
    let mut cameras = Vec::with_capacity(f);
    for i in 0..f {
        let s = basis.shape(i);
        let cam = Camera::new(random_rotation_rows(&mut camera_rng))?;
        let w = cam.m().matmul(&s)?;
        frames.push(Frame2D::visible(w, i)?);
        gt.push(Shape3D::new(s)?);
        cameras.push(cam);
    }
    let name = format!("synth-p{p}-f{f}-k{k}");
    let mut dataset = Dataset::new(name, frames, Some(gt))?;
    if cfg.noise_ratio > 0.0 {
        dataset = add_noise(&dataset, cfg.noise_ratio, cfg.shape_seed)?;
    }
    Ok(Synthetic {
        dataset,
        cameras,
        basis,
    })
}

/// Adds Gaussian noise to the visible 2D coordinates, scaled so that
/// `‖noise‖_F / ‖W‖_F` over the whole dataset equals `ratio`.
///
/// The noise is centered over each frame's visible points before scaling, so
/// frames stay centered and the ratio is exact. Uses stream 1 of `seed`.
pub fn add_noise(ds: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    if !(ratio >= 0.0 && ratio.is_finite()) {
        return Err(Error::Config(format!("noise ratio {ratio} must be >= 0")));
    }
    if ratio == 0.0 {
        return Ok(ds.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut noise = Vec::with_capacity(ds.len());
    let mut noise_sq = 0.0;
    let mut signal_sq = 0.0;
    for f in ds.frames() {
        let raw = Mat::from_fn(2, f.points(), |_, _| StandardNormal.sample(&mut rng));
        let n = crate::model::center_visible(&raw, f.mask());
        noise_sq += n.data().iter().map(|v| v * v).sum::<f64>();
        signal_sq += f.w().data().iter().map(|v| v * v).sum::<f64>();
        noise.push(n);
    }
    if noise_sq == 0.0 || signal_sq == 0.0 {
        return Err(Error::Degenerate("cannot scale noise for an all-zero dataset".into()));
    }
    let scale = ratio * signal_sq.sqrt() / noise_sq.sqrt();
    let frames = ds
        .frames()
        .iter()
        .zip(noise)
        .map(|(f, n)| Frame2D::new(f.w().add(&n.scale(scale))?, f.mask().to_vec(), f.index()))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(ds.name().to_string(), frames, ds.gt().map(<[Shape3D]>::to_vec))
}
