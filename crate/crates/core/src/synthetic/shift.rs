//! Fog-style target-domain corruption.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Concrete shift applied to one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// Blend factor toward white.
    pub fog_alpha: f64,
    /// Box-blur radius in pixels (0 disables blur).
    pub blur_radius: usize,
    /// Maximum relative brightness change; the actual factor is drawn from
    /// `1 ± brightness_jitter` with the shift seed.
    pub brightness_jitter: f64,
}

impl ShiftSpec {
    pub fn identity() -> Self {
        Self {
            fog_alpha: 0.0,
            blur_radius: 0,
            brightness_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fog_alpha) || !(0.0..1.0).contains(&self.brightness_jitter) {
            return Err(Error::InvalidArgument(format!("invalid shift {self:?}")));
        }
        Ok(())
    }
}

/// Ranges per-image shifts are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftRange {
    pub fog_alpha_min: f64,
    pub fog_alpha_max: f64,
    pub blur_min: usize,
    pub blur_max: usize,
    pub brightness_jitter: f64,
}

impl Default for ShiftRange {
    fn default() -> Self {
        Self {
            fog_alpha_min: 0.3,
            fog_alpha_max: 0.6,
            blur_min: 1,
            blur_max: 2,
            brightness_jitter: 0.1,
        }
    }
}

impl ShiftRange {
    /// Fixed fog strength, other ranges at their defaults.
    pub fn with_fog_alpha(alpha: f64) -> Self {
        Self {
            fog_alpha_min: alpha,
            fog_alpha_max: alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.fog_alpha_min)
            && (0.0..=1.0).contains(&self.fog_alpha_max)
            && self.fog_alpha_min <= self.fog_alpha_max
            && self.blur_min <= self.blur_max
            && (0.0..1.0).contains(&self.brightness_jitter);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid shift range {self:?}")))
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> ShiftSpec {
        ShiftSpec {
            fog_alpha: if self.fog_alpha_min < self.fog_alpha_max {
                rng.gen_range(self.fog_alpha_min..=self.fog_alpha_max)
            } else {
                self.fog_alpha_min
            },
            blur_radius: rng.gen_range(self.blur_min..=self.blur_max),
            brightness_jitter: self.brightness_jitter,
        }
    }
}

/// Separable box blur with the window clipped at the borders.
fn box_blur(data: &[f64], c: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (pos, len) = if along_x { (x, w) } else { (y, h) };
                    let lo = pos.saturating_sub(r);
                    let hi = (pos + r).min(len - 1);
                    let mut acc = 0.0;
                    for q in lo..=hi {
                        let (xx, yy) = if along_x { (q, y) } else { (x, q) };
                        acc += src[(ch * h + yy) * w + xx];
                    }
                    out[(ch * h + y) * w + x] = acc / (hi - lo + 1) as f64;
                }
            }
        }
        out
    };
    pass(&pass(data, true), false)
}

/// `clamp((blur(image)·(1−α) + α) · b)` with `b` drawn from the seed.
pub fn apply_domain_shift(image: &Tensor, shift: &ShiftSpec, seed: u64) -> Result<Tensor> {
    shift.validate()?;
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("domain shift", format!("expected [C,H,W], got {s:?}")));
    }
    let blurred = if shift.blur_radius > 0 {
        box_blur(image.data(), s[0], s[1], s[2], shift.blur_radius)
    } else {
        image.data().to_vec()
    };
    let factor = if shift.brightness_jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        1.0 + rng.gen_range(-shift.brightness_jitter..=shift.brightness_jitter)
    } else {
        1.0
    };
    let a = shift.fog_alpha;
    let out = blurred
        .into_iter()
        .map(|v| ((v * (1.0 - a) + a) * factor).clamp(0.0, 1.0))
        .collect();
    Tensor::new(s, out)
}
