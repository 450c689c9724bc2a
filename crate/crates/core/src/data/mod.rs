//! Datasets: loading, synthesis, splitting and subsampling.

mod io;
mod synth;

pub use io::{load_dataset, save_dataset, DataFormat};
pub use synth::{add_noise, synthesize, BasisModel, SynthConfig, Synthetic};

use serde::{Deserialize, Serialize};

use crate::diffcore::Mat;
use crate::error::{Error, Result};
use crate::model::{Frame2D, Shape3D};
use crate::model::is_roundoff;

/// Ordered frames with optional aligned ground truth.
///
/// Frame indices are kept when frames are split or subsampled, so they stay
/// unique across the pieces of one source dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    name: String,
    points: usize,
    frames: Vec<Frame2D>,
    gt: Option<Vec<Shape3D>>,
}

impl Dataset {
    /// Validates point counts and centers the ground truth over all points.
    pub fn new(name: impl Into<String>, frames: Vec<Frame2D>, gt: Option<Vec<Shape3D>>) -> Result<Self> {
        let name = name.into();
        let points = frames
            .first()
            .map(Frame2D::points)
            .ok_or_else(|| Error::Format(format!("dataset {name:?} has no frames")))?;
        if let Some(f) = frames.iter().find(|f| f.points() != points) {
            return Err(Error::Format(format!(
                "frame {} has {} points, expected {points}",
                f.index(),
                f.points()
            )));
        }
        let gt = match gt {
            None => None,
            Some(shapes) => {
                if shapes.len() != frames.len() {
                    return Err(Error::Format(format!(
                        "{} ground-truth shapes for {} frames",
                        shapes.len(),
                        frames.len()
                    )));
                }
                let mut centered = Vec::with_capacity(shapes.len());
                for (i, s) in shapes.into_iter().enumerate() {
                    if s.points() != points {
                        return Err(Error::Format(format!(
                            "ground truth {i} has {} points, expected {points}",
                            s.points()
                        )));
                    }
                    centered.push(Shape3D::new(center_rows(s.s()))?);
                }
                Some(centered)
            }
        };
        Ok(Dataset {
            name,
            points,
            frames,
            gt,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn frames(&self) -> &[Frame2D] {
        &self.frames
    }

    pub fn gt(&self) -> Option<&[Shape3D]> {
        self.gt.as_deref()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames (and ground truth) at the given positions, in that order.
    pub fn select(&self, positions: &[usize], name: impl Into<String>) -> Result<Dataset> {
        let frames = positions.iter().map(|&i| self.frames[i].clone()).collect();
        let gt = self
            .gt
            .as_ref()
            .map(|g| positions.iter().map(|&i| g[i].clone()).collect());
        Dataset::new(name, frames, gt)
    }

    /// `2F × P` stack of all observations.
    pub fn stacked(&self) -> Mat {
        let p = self.points;
        Mat::from_fn(2 * self.len(), p, |r, c| self.frames[r / 2].w().get(r % 2, c))
    }

    pub fn fully_visible(&self) -> bool {
        self.frames.iter().all(|f| f.visible_count() == f.points())
    }
}

/// Subtracts each row's mean (rows already centered to round-off are kept).
pub fn center_rows(m: &Mat) -> Mat {
    let n = m.cols() as f64;
    let means: Vec<f64> = (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let scale = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if is_roundoff(mean, scale) {
                0.0
            } else {
                mean
            }
        })
        .collect();
    Mat::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c) - means[r])
}

/// First `⌊fraction·F⌋` frames for training, the rest for testing.
pub fn split_train_test(ds: &Dataset, fraction: f64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} not in (0, 1)")));
    }
    if ds.len() < 5 {
        return Err(Error::Format(format!("cannot split {} frames (need 5)", ds.len())));
    }
    let cut = (fraction * ds.len() as f64).floor() as usize;
    if cut == 0 || cut == ds.len() {
        return Err(Error::Config(format!(
            "split fraction {fraction} leaves an empty side of {} frames",
            ds.len()
        )));
    }
    let train: Vec<usize> = (0..cut).collect();
    let test: Vec<usize> = (cut..ds.len()).collect();
    Ok((
        ds.select(&train, format!("{}-train", ds.name()))?,
        ds.select(&test, format!("{}-test", ds.name()))?,
    ))
}

/// Keeps `round(keep·F)` frames at a uniform stride, starting with the first.
pub fn downsample(ds: &Dataset, keep: f64) -> Result<Dataset> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::Config(format!("keep fraction {keep} not in (0, 1]")));
    }
    let f = ds.len();
    let count = ((keep * f as f64).round() as usize).clamp(1, f);
    let positions: Vec<usize> = (0..count).map(|k| k * f / count).collect();
    ds.select(&positions, ds.name().to_string())
}
