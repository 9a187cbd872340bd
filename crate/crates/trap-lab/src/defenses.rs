//! Image-space preprocessing defenses: median filtering, Gaussian blur,
//! bit-depth reduction, and a JPEG-style block-DCT quantizer. All are
//! pure functions of the observation; same input gives bit-identical
//! output.

use crate::diffmath::Array;
use crate::envs::{Observation, IMG_H, IMG_W};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("median kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error("bit count must be in [1,16], got {0}")]
    BadBits(u32),
    #[error("jpeg quality must be in [1,100], got {0}")]
    BadQuality(u32),
    #[error("gaussian sigma must be nonnegative, got {0}")]
    BadSigma(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseSpec {
    None,
    Median { kernel: usize },
    Gaussian { sigma: f64 },
    Bitdepth { bits: u32 },
    JpegLike { quality: u32 },
}

impl DefenseSpec {
    pub fn validate(&self) -> Result<(), DefenseError> {
        match *self {
            DefenseSpec::None => Ok(()),
            DefenseSpec::Median { kernel } => {
                if kernel % 2 == 0 || kernel == 0 {
                    Err(DefenseError::EvenKernel(kernel))
                } else {
                    Ok(())
                }
            }
            DefenseSpec::Gaussian { sigma } => {
                if sigma < 0.0 || !sigma.is_finite() {
                    Err(DefenseError::BadSigma(sigma))
                } else {
                    Ok(())
                }
            }
            DefenseSpec::Bitdepth { bits } => {
                if (1..=16).contains(&bits) {
                    Ok(())
                } else {
                    Err(DefenseError::BadBits(bits))
                }
            }
            DefenseSpec::JpegLike { quality } => {
                if (1..=100).contains(&quality) {
                    Ok(())
                } else {
                    Err(DefenseError::BadQuality(quality))
                }
            }
        }
    }

    /// CLI shorthand: none, median3, median5, gaussian0.5, bitdepth4,
    /// jpeg60.
    pub fn parse(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s == "none" {
            return Ok(DefenseSpec::None);
        }
        let split = |prefix: &str| s.strip_prefix(prefix).map(|t| t.to_string());
        let spec = if let Some(t) = split("median") {
            DefenseSpec::Median {
                kernel: t.parse().map_err(|_| format!("bad kernel in {s:?}"))?,
            }
        } else if let Some(t) = split("gaussian") {
            DefenseSpec::Gaussian {
                sigma: t.parse().map_err(|_| format!("bad sigma in {s:?}"))?,
            }
        } else if let Some(t) = split("bitdepth") {
            DefenseSpec::Bitdepth {
                bits: t.parse().map_err(|_| format!("bad bits in {s:?}"))?,
            }
        } else if let Some(t) = split("jpeg") {
            DefenseSpec::JpegLike {
                quality: t.parse().map_err(|_| format!("bad quality in {s:?}"))?,
            }
        } else {
            return Err(format!("unknown defense {s:?}"));
        };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

/// Apply the defense to an observation. Shape and [0,1] range are
/// preserved for every kind.
pub fn defend(obs: &Observation, d: &DefenseSpec) -> Result<Observation, DefenseError> {
    d.validate()?;
    let out = match *d {
        DefenseSpec::None => return Ok(obs.clone()),
        DefenseSpec::Median { kernel } => per_channel(obs, |ch| median_filter(ch, kernel)),
        DefenseSpec::Gaussian { sigma } => per_channel(obs, |ch| gaussian_blur(ch, sigma)),
        DefenseSpec::Bitdepth { bits } => {
            let levels = (1u32 << bits) as f64 - 1.0;
            let mut img = obs.image.clone();
            for v in img.data_mut() {
                *v = (*v * levels).round() / levels;
            }
            return Ok(Observation::new(img));
        }
        DefenseSpec::JpegLike { quality } => per_channel(obs, |ch| jpeg_like_channel(ch, quality)),
    };
    Ok(out)
}

/// Run a H×W transform on each of the 3 channels.
fn per_channel<F: Fn(&[f64]) -> Vec<f64>>(obs: &Observation, f: F) -> Observation {
    let mut out = vec![0.0; IMG_H * IMG_W * 3];
    for c in 0..3 {
        let ch: Vec<f64> = (0..IMG_H * IMG_W)
            .map(|p| obs.image.data()[p * 3 + c])
            .collect();
        let filtered = f(&ch);
        for (p, v) in filtered.iter().enumerate() {
            out[p * 3 + c] = v.clamp(0.0, 1.0);
        }
    }
    Observation::new(Array::from_vec(vec![IMG_H, IMG_W, 3], out).unwrap())
}

/// Edge-replicated pixel fetch.
fn at_clamped(ch: &[f64], i: isize, j: isize) -> f64 {
    let i = i.clamp(0, IMG_H as isize - 1) as usize;
    let j = j.clamp(0, IMG_W as isize - 1) as usize;
    ch[i * IMG_W + j]
}

fn median_filter(ch: &[f64], k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; IMG_H * IMG_W];
    let mut window = Vec::with_capacity(k * k);
    for i in 0..IMG_H as isize {
        for j in 0..IMG_W as isize {
            window.clear();
            for di in -r..=r {
                for dj in -r..=r {
                    window.push(at_clamped(ch, i + di, j + dj));
                }
            }
            window.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out[i as usize * IMG_W + j as usize] = window[window.len() / 2];
        }
    }
    out
}

/// Separable blur with a kernel truncated at radius ceil(3σ) and
/// renormalized to sum 1.
fn gaussian_blur(ch: &[f64], sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    if r == 0 || sigma == 0.0 {
        return ch.to_vec();
    }
    let mut kernel: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = kernel.iter().sum();
    for w in kernel.iter_mut() {
        *w /= s;
    }
    // horizontal pass then vertical pass, edge replication
    let mut tmp = vec![0.0; IMG_H * IMG_W];
    for i in 0..IMG_H as isize {
        for j in 0..IMG_W as isize {
            let mut acc = 0.0;
            for (wi, w) in kernel.iter().enumerate() {
                acc += w * at_clamped(ch, i, j + wi as isize - r);
            }
            tmp[i as usize * IMG_W + j as usize] = acc;
        }
    }
    let mut out = vec![0.0; IMG_H * IMG_W];
    for i in 0..IMG_H as isize {
        for j in 0..IMG_W as isize {
            let mut acc = 0.0;
            for (wi, w) in kernel.iter().enumerate() {
                acc += w * at_clamped(&tmp, i + wi as isize - r, j);
            }
            out[i as usize * IMG_W + j as usize] = acc;
        }
    }
    out
}

/// Standard JPEG luminance quantization table (8×8, zig-zag free,
/// row-major).
const LUMA_Q: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

/// Quality-scaled quantization table following the IJG convention:
/// scale = 50/quality for quality < 50, (100 − quality)/50 for
/// quality ≥ 50; each entry is max(1, round(base · scale)). At
/// quality=100 the scale is 0, so every entry collapses to 1 and the
/// quantizer is nearly transparent.
fn scaled_quant_table(quality: u32) -> [f64; 64] {
    let q = quality as f64;
    let scale = if q < 50.0 { 50.0 / q } else { (100.0 - q) / 50.0 };
    let mut t = [0.0; 64];
    for (dst, base) in t.iter_mut().zip(LUMA_Q.iter()) {
        *dst = (base * scale).round().max(1.0);
    }
    t
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let a = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * ((2.0 * x as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

/// Per-channel JPEG analogue: 8×8 block DCT on values shifted to
/// [−128, 127] (pixel × 255 − 128), quantize/dequantize with the scaled
/// luminance table, inverse DCT, rescale. No subsampling or entropy
/// coding — the defense effect is entirely in the quantization.
fn jpeg_like_channel(ch: &[f64], quality: u32) -> Vec<f64> {
    let qt = scaled_quant_table(quality);
    let c = dct_basis();
    let mut out = vec![0.0; IMG_H * IMG_W];
    let mut block = [[0.0f64; 8]; 8];
    let mut coeff = [[0.0f64; 8]; 8];
    for bi in (0..IMG_H).step_by(8) {
        for bj in (0..IMG_W).step_by(8) {
            for (x, row) in block.iter_mut().enumerate() {
                for (y, v) in row.iter_mut().enumerate() {
                    let i = (bi + x).min(IMG_H - 1);
                    let j = (bj + y).min(IMG_W - 1);
                    *v = ch[i * IMG_W + j] * 255.0 - 128.0;
                }
            }
            // forward DCT: F = C · block · Cᵀ
            for u in 0..8 {
                for v in 0..8 {
                    let mut acc = 0.0;
                    for (x, row) in block.iter().enumerate() {
                        for (y, val) in row.iter().enumerate() {
                            acc += c[u][x] * val * c[v][y];
                        }
                    }
                    let q = qt[u * 8 + v];
                    coeff[u][v] = (acc / q).round() * q;
                }
            }
            // inverse DCT: block = Cᵀ · F · C
            for x in 0..8 {
                for y in 0..8 {
                    let mut acc = 0.0;
                    for (u, row) in coeff.iter().enumerate() {
                        for (v, val) in row.iter().enumerate() {
                            acc += c[u][x] * val * c[v][y];
                        }
                    }
                    let i = bi + x;
                    let j = bj + y;
                    if i < IMG_H && j < IMG_W {
                        out[i * IMG_W + j] = (acc + 128.0) / 255.0;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_obs(rng: &mut ChaCha8Rng) -> Observation {
        let data: Vec<f64> = (0..IMG_H * IMG_W * 3).map(|_| rng.gen_range(0.0..=1.0)).collect();
        Observation::new(Array::from_vec(vec![IMG_H, IMG_W, 3], data).unwrap())
    }

    fn all_specs() -> Vec<DefenseSpec> {
        vec![
            DefenseSpec::None,
            DefenseSpec::Median { kernel: 3 },
            DefenseSpec::Median { kernel: 5 },
            DefenseSpec::Gaussian { sigma: 0.5 },
            DefenseSpec::Gaussian { sigma: 1.0 },
            DefenseSpec::Bitdepth { bits: 2 },
            DefenseSpec::Bitdepth { bits: 4 },
            DefenseSpec::JpegLike { quality: 30 },
            DefenseSpec::JpegLike { quality: 60 },
        ]
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(matches!(
            defend(&random_obs(&mut ChaCha8Rng::seed_from_u64(0)), &DefenseSpec::Median { kernel: 4 }),
            Err(DefenseError::EvenKernel(4))
        ));
        assert!(DefenseSpec::Bitdepth { bits: 0 }.validate().is_err());
        assert!(DefenseSpec::Bitdepth { bits: 17 }.validate().is_err());
        assert!(DefenseSpec::JpegLike { quality: 0 }.validate().is_err());
        assert!(DefenseSpec::JpegLike { quality: 101 }.validate().is_err());
    }

    #[test]
    fn constant_image_unchanged_by_median() {
        let obs = Observation::new(Array::full(vec![IMG_H, IMG_W, 3], 0.37));
        let out = defend(&obs, &DefenseSpec::Median { kernel: 3 }).unwrap();
        assert_eq!(obs, out);
    }

    #[test]
    fn median_removes_single_impulse() {
        let mut img = Array::zeros(vec![IMG_H, IMG_W, 3]);
        img.data_mut()[(10 * IMG_W + 10) * 3] = 1.0;
        let out = defend(&Observation::new(img), &DefenseSpec::Median { kernel: 3 }).unwrap();
        assert_eq!(out.get(10, 10, 0), 0.0);
        assert!(out.image.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bitdepth_hand_examples() {
        let mut img = Array::zeros(vec![IMG_H, IMG_W, 3]);
        img.data_mut()[0] = 0.6;
        let out = defend(&Observation::new(img), &DefenseSpec::Bitdepth { bits: 1 }).unwrap();
        assert_eq!(out.image.data()[0], 1.0);
        assert_eq!(out.image.data()[1], 0.0);
    }

    #[test]
    fn bitdepth8_is_fixed_point_on_quantized_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs = random_obs(&mut rng);
        let q = defend(&obs, &DefenseSpec::Bitdepth { bits: 8 }).unwrap();
        let q2 = defend(&q, &DefenseSpec::Bitdepth { bits: 8 }).unwrap();
        for (a, b) in q.image.data().iter().zip(q2.image.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn gaussian_sigma_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let obs = random_obs(&mut rng);
        let out = defend(&obs, &DefenseSpec::Gaussian { sigma: 0.0 }).unwrap();
        assert_eq!(obs, out);
    }

    #[test]
    fn gaussian_preserves_constant_images() {
        let obs = Observation::new(Array::full(vec![IMG_H, IMG_W, 3], 0.4));
        let out = defend(&obs, &DefenseSpec::Gaussian { sigma: 1.0 }).unwrap();
        for v in out.image.data() {
            assert!((v - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn jpeg_quality_100_nearly_transparent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let obs = random_obs(&mut rng);
            let out = defend(&obs, &DefenseSpec::JpegLike { quality: 100 }).unwrap();
            for (a, b) in obs.image.data().iter().zip(out.image.data()) {
                assert!((a - b).abs() <= 2.0 / 255.0, "|{a} - {b}|");
            }
        }
    }

    #[test]
    fn jpeg_low_quality_actually_changes_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let obs = random_obs(&mut rng);
        let out = defend(&obs, &DefenseSpec::JpegLike { quality: 10 }).unwrap();
        let max_diff = obs
            .image
            .data()
            .iter()
            .zip(out.image.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 0.05, "max_diff = {max_diff}");
    }

    #[test]
    fn range_and_shape_preserved_on_random_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let obs = random_obs(&mut rng);
            for spec in all_specs() {
                let out = defend(&obs, &spec).unwrap();
                assert_eq!(out.image.shape(), &[IMG_H, IMG_W, 3]);
                assert!(out.in_range(), "{spec:?} broke range");
            }
        }
    }

    #[test]
    fn defenses_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let obs = random_obs(&mut rng);
        for spec in all_specs() {
            let a = defend(&obs, &spec).unwrap();
            let b = defend(&obs, &spec).unwrap();
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn parse_shorthand() {
        assert_eq!(DefenseSpec::parse("none").unwrap(), DefenseSpec::None);
        assert_eq!(
            DefenseSpec::parse("median3").unwrap(),
            DefenseSpec::Median { kernel: 3 }
        );
        assert_eq!(
            DefenseSpec::parse("gaussian0.5").unwrap(),
            DefenseSpec::Gaussian { sigma: 0.5 }
        );
        assert_eq!(
            DefenseSpec::parse("bitdepth4").unwrap(),
            DefenseSpec::Bitdepth { bits: 4 }
        );
        assert_eq!(
            DefenseSpec::parse("jpeg60").unwrap(),
            DefenseSpec::JpegLike { quality: 60 }
        );
        assert!(DefenseSpec::parse("median4").is_err());
        assert!(DefenseSpec::parse("foo").is_err());
    }
}
