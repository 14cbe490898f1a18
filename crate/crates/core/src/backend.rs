//! Model-service abstractions beyond the denoiser/codec: embedding, image
//! relighting and class-image sampling. Toy versions run fully offline.

use std::fmt;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, Error, PartialEq)]
#[error("backend failure: {0}")]
pub struct BackendError(pub String);

pub trait Embedder: Send + Sync {
    /// Unit-norm text embedding.
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, BackendError>;
    /// Unit-norm image embedding; image is `H × W × 3` in `[0,1]`.
    fn embed_image(&self, image: &Array3<f32>) -> Result<Vec<f32>, BackendError>;
    /// Identifier recorded in reports.
    fn name(&self) -> String;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightDirection {
    Left,
    Right,
}

impl LightDirection {
    pub const ALL: [LightDirection; 2] = [LightDirection::Left, LightDirection::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Left => "left",
            Self::Right => "right",
        }
    }
}

impl fmt::Display for LightDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LightDirection {
    type Err = BackendError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "left" => Ok(Self::Left),
            "right" => Ok(Self::Right),
            other => Err(BackendError(format!("invalid direction {other:?}"))),
        }
    }
}

/// Services used to build the personalization dataset.
pub trait PersonalizationBackend: Send + Sync {
    fn relight(
        &self,
        image: &Array3<f32>,
        fg_prompt: &str,
        bg_prompt: &str,
        direction: LightDirection,
    ) -> Result<Array3<f32>, BackendError>;

    /// One generic class image for `prompt`, `height × width × 3`.
    fn sample_class(&self, prompt: &str, seed: u64, height: usize, width: usize) -> Result<Array3<f32>, BackendError>;
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn normalized(mut v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
    } else if let Some(first) = v.first_mut() {
        *first = 1.0;
    }
    v
}

/// Text → hash-seeded Gaussian vector; image → centred 4×4 block means.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyEmbedder;

pub const TOY_EMBED_DIM: usize = 48;

impl Embedder for ToyEmbedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(text.as_bytes()));
        let v = (0..TOY_EMBED_DIM)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x as f32
            })
            .collect();
        Ok(normalized(v))
    }

    fn embed_image(&self, image: &Array3<f32>) -> Result<Vec<f32>, BackendError> {
        let (h, w, c) = image.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(BackendError(format!("bad image shape {:?}", image.shape())));
        }
        let mut v = vec![0.0f64; TOY_EMBED_DIM];
        let mut counts = vec![0usize; 16];
        for ((y, x, k), &p) in image.indexed_iter() {
            let cell = (y * 4 / h) * 4 + x * 4 / w;
            v[cell * 3 + k] += p as f64 - 0.5;
            if k == 0 {
                counts[cell] += 1;
            }
        }
        let v = v
            .iter()
            .enumerate()
            .map(|(i, s)| (s / counts[i / 3].max(1) as f64) as f32)
            .collect();
        Ok(normalized(v))
    }

    fn name(&self) -> String {
        "toy-embedder".into()
    }
}

/// Relighting multiplies by a horizontal ramp brighter on the requested side;
/// class images are hash-seeded uniform noise.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyPersonalization;

impl PersonalizationBackend for ToyPersonalization {
    fn relight(
        &self,
        image: &Array3<f32>,
        _fg_prompt: &str,
        bg_prompt: &str,
        direction: LightDirection,
    ) -> Result<Array3<f32>, BackendError> {
        let (_, w, _) = image.dim();
        let tint = (fnv1a(bg_prompt.as_bytes()) % 1000) as f32 / 1000.0;
        Ok(Array3::from_shape_fn(image.dim(), |(y, x, c)| {
            let u = if w > 1 { x as f32 / (w - 1) as f32 } else { 0.5 };
            let u = match direction {
                LightDirection::Left => 1.0 - u,
                LightDirection::Right => u,
            };
            let gain = 0.5 + 0.5 * u + if c == 0 { 0.1 * tint } else { 0.0 };
            (image[[y, x, c]] * gain).clamp(0.0, 1.0)
        }))
    }

    fn sample_class(&self, prompt: &str, seed: u64, height: usize, width: usize) -> Result<Array3<f32>, BackendError> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(prompt.as_bytes()) ^ seed);
        Ok(Array3::from_shape_simple_fn((height, width, 3), || rng.random::<f32>()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_embeddings_are_unit_and_deterministic() {
        let e = ToyEmbedder;
        let a = e.embed_text("a mug").unwrap();
        assert_eq!(a, e.embed_text("a mug").unwrap());
        let n: f32 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-5);
        let img = Array3::from_shape_fn((8, 8, 3), |(y, _, _)| y as f32 / 8.0);
        let b = e.embed_image(&img).unwrap();
        let n: f32 = b.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-5);
    }

    #[test]
    fn direction_parsing() {
        assert_eq!("left".parse::<LightDirection>().unwrap(), LightDirection::Left);
        assert!("up".parse::<LightDirection>().is_err());
    }
}
