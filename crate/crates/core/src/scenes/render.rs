use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Cell, Color, DistractorConfig, Object, Scene, Shape, Size};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image's spatial feature map, `height × width × channels`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Contract(format!(
                "empty feature grid {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::Contract(format!(
                "feature grid {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "feature grid holds non-finite values".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.values[start..start + self.channels]
    }

    /// `(H·W, C)` tensor, one row per position.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.positions(), self.channels],
            self.values.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("grid shape")
    }
}

/// Fixed random projection from attribute one-hots to feature vectors.
///
/// An object's vector is the sum of its shape, color and size rows; empty
/// cells get a constant non-zero background vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    channels: usize,
    shape: Vec<Vec<f64>>,
    color: Vec<Vec<f64>>,
    size: Vec<Vec<f64>>,
    background: Vec<f64>,
}

impl Codebook {
    pub fn new(seed: u64, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..channels).map(|_| StandardNormal.sample(rng)).collect()
        };
        let shape = Shape::ALL.iter().map(|_| row(&mut rng)).collect();
        let color = Color::ALL.iter().map(|_| row(&mut rng)).collect();
        let size = Size::ALL.iter().map(|_| row(&mut rng)).collect();
        let background = row(&mut rng);
        Self {
            channels,
            shape,
            color,
            size,
            background,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn object_vector(&self, o: Object) -> Vec<f64> {
        (0..self.channels)
            .map(|c| {
                self.shape[o.shape as usize][c]
                    + self.color[o.color as usize][c]
                    + self.size[o.size as usize][c]
            })
            .collect()
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    /// Renders `scene`, then applies shift, gain and noise in that order.
    pub fn render(
        &self,
        scene: &Scene,
        distractor: &DistractorConfig,
        noise_seed: u64,
    ) -> FeatureGrid {
        let g = scene.grid_size();
        let c = self.channels;
        let mut values = vec![0.0f64; g * g * c];
        for row in 0..g {
            for col in 0..g {
                let src = Cell::new(row, col);
                let v = match scene.get(src) {
                    Some(o) => self.object_vector(o),
                    None => self.background.clone(),
                };
                let dst = src.shifted(distractor.shift, g);
                let start = (dst.row * g + dst.col) * c;
                for (k, x) in v.into_iter().enumerate() {
                    values[start + k] = distractor.gain * x;
                }
            }
        }
        if distractor.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let noise = Normal::new(0.0, distractor.noise_sigma).expect("validated sigma");
            for v in &mut values {
                *v += noise.sample(&mut rng);
            }
        }
        FeatureGrid::new(g, g, c, values.into_iter().map(|v| v as f32).collect())
            .expect("rendered grid")
    }
}
