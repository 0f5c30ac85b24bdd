//! Deterministic moving-shape scenes with exact foreground masks, plus the
//! text-to-vector conditioning used by the DiT-lite.

use ndarray::{Array1, Array4};
use rand::Rng;

use crate::error::{KvLockError, Result};
use crate::mask::{latent_grid, token_grid, Compression, PatchSize, PixelMask};
use crate::rng::{fnv1a64, normal, stream};
use crate::scalar::Real;
use crate::video::Video;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Blob radius as a fraction of `min(H, W)`.
    pub radius: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            frames: 17,
            height: 64,
            width: 64,
            radius: 0.18,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene<T> {
    pub video: Video<T>,
    pub mask: PixelMask,
    pub source_prompt: String,
    pub target_prompt: String,
}

const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [0.9, 0.15, 0.1]),
    ("green", [0.15, 0.85, 0.2]),
    ("blue", [0.1, 0.2, 0.9]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("magenta", [0.85, 0.1, 0.8]),
    ("white", [0.95, 0.95, 0.95]),
];

/// Checks that `(F, H, W)` survives compression and patching.
pub fn check_dims(dims: (usize, usize, usize), s: Compression, p: PatchSize) -> Result<(usize, usize, usize)> {
    token_grid(latent_grid(dims, s)?, p)
}

/// Textured static background with one disc moving across it. The mask is
/// exactly the disc pixels of each frame.
pub fn make_synthetic_video<T: Real>(seed: u64, spec: &SceneSpec) -> Result<Scene<T>> {
    let (f, h, w) = (spec.frames, spec.height, spec.width);
    check_dims((f, h, w), Compression::default(), PatchSize::default())?;
    if !(spec.radius > 0.0 && spec.radius < 0.5) {
        return Err(KvLockError::Config(format!("blob radius {} outside (0, 0.5)", spec.radius)));
    }
    let mut rng = stream(seed, "scene");
    let mut waves = [[0.0f64; 6]; 3];
    for wave in &mut waves {
        *wave = [
            rng.random_range(1..=3) as f64,
            rng.random_range(0..=2) as f64,
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0..=2) as f64,
            rng.random_range(1..=3) as f64,
            rng.random_range(0.0..std::f64::consts::TAU),
        ];
    }
    let color_idx = rng.random_range(0..COLORS.len());
    let target_idx = (color_idx + 1 + rng.random_range(0..COLORS.len() - 1)) % COLORS.len();
    let (color_name, color) = COLORS[color_idx];
    let r = spec.radius * h.min(w) as f64;
    let margin = r + 1.0;
    let mut pick = |extent: usize| rng.random_range(margin..(extent as f64 - margin));
    let (x0, y0, x1, y1) = (pick(w), pick(h), pick(w), pick(h));

    let mut data = Array4::<T>::zeros((3, f, h, w));
    let mut mask = PixelMask::zeros(f, h, w);
    for fr in 0..f {
        let s = if f > 1 { fr as f64 / (f - 1) as f64 } else { 0.0 };
        let (cx, cy) = (x0 + s * (x1 - x0), y0 + s * (y1 - y0));
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
                let inside = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2) <= r * r;
                mask.set(fr, y, x, inside);
                for c in 0..3 {
                    let value = if inside {
                        color[c]
                    } else {
                        let wv = waves[c];
                        0.5 + 0.22 * (std::f64::consts::TAU * (wv[0] * u + wv[1] * v) + wv[2]).sin()
                            + 0.12 * (std::f64::consts::TAU * (wv[3] * u + wv[4] * v) + wv[5]).cos()
                    };
                    data[[c, fr, y, x]] = T::lit(value);
                }
            }
        }
    }
    let dir = if x1 >= x0 { "right" } else { "left" };
    Ok(Scene {
        video: Video::new(data)?,
        mask,
        source_prompt: format!("a {color_name} disc drifting {dir} over striped paper"),
        target_prompt: format!("a {} disc drifting {dir} over striped paper", COLORS[target_idx].0),
    })
}

/// Deterministic unit-variance embedding of a prompt.
pub fn prompt_embedding<T: Real>(prompt: &str, dim: usize) -> Array1<T> {
    let mut rng = stream(fnv1a64(prompt.as_bytes()), "prompt");
    Array1::from_shape_simple_fn(dim, || T::from_disk(normal::<f64, _>(&mut rng) as f32))
}
