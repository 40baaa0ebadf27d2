//! Synthetic dataset construction: procedural clean images, AWGN and
//! non-i.i.d. spatial noise, patch pairs, and the w/arch split.

use crate::error::{DenasError, Result};
use crate::tensor::TensorData;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SIGMA_MIN: f64 = 5.0 / 255.0;
pub const SIGMA_MAX: f64 = 50.0 / 255.0;

/// Noise model applied to clean patches.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseCase {
    /// i.i.d. Gaussian with uniform per-pixel sigma.
    Awgn { sigma: f64, seed: u64 },
    /// Unit Gaussian scaled elementwise by a spatial sigma map.
    Spatial { map_case: u8, seed: u64 },
}

impl NoiseCase {
    pub fn awgn_preset(level: u32, seed: u64) -> Result<Self> {
        if ![15, 25, 50].contains(&level) {
            return Err(DenasError::arg("noise_case", format!("AWGN preset {level}")));
        }
        Ok(NoiseCase::Awgn {
            sigma: level as f64 / 255.0,
            seed,
        })
    }

    pub fn seed(&self) -> u64 {
        match self {
            NoiseCase::Awgn { seed, .. } | NoiseCase::Spatial { seed, .. } => *seed,
        }
    }

    pub fn label(&self) -> String {
        match self {
            NoiseCase::Awgn { sigma, .. } => format!("awgn_{:.0}", sigma * 255.0),
            NoiseCase::Spatial { map_case, .. } => format!("spatial_{map_case}"),
        }
    }
}

/// Standard normal sample (Box-Muller, one draw per call).
pub fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Smooth strictly-positive sigma map in [SIGMA_MIN, SIGMA_MAX]: a
/// min-max-normalized mixture of Gaussian bumps whose count and bandwidth
/// depend on the case id. Case 1 is the training map; 2-4 are test maps.
pub fn gen_sigma_map(h: usize, w: usize, case: u8, seed: u64) -> Result<TensorData> {
    if h < 8 || w < 8 {
        return Err(DenasError::arg("gen_sigma_map", "size must be >= 8x8"));
    }
    if !(1..=4).contains(&case) {
        return Err(DenasError::arg("gen_sigma_map", format!("case {case}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5167_0000 + case as u64));
    let bumps = 1 + case as usize;
    let bw_scale = [0.35, 0.20, 0.50, 0.12][case as usize - 1];
    let mut centers = vec![];
    for _ in 0..bumps {
        centers.push((
            rng.random_range(0.0..h as f64),
            rng.random_range(0.0..w as f64),
            rng.random_range(0.5..1.5) * bw_scale * h.max(w) as f64,
            rng.random_range(0.3..1.0),
        ));
    }
    let mut field = TensorData::zeros([1, 1, h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0;
            for &(cy, cx, bw, amp) in &centers {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                v += amp * (-d2 / (2.0 * bw * bw)).exp();
            }
            *field.at_mut(0, 0, y, x) = v;
        }
    }
    let lo = field.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    for v in &mut field.data {
        *v = SIGMA_MIN + (SIGMA_MAX - SIGMA_MIN) * (*v - lo) / span;
    }
    Ok(field)
}

/// Add noise per the case; values are not clipped unless `clip` is set.
pub fn add_noise(clean: &TensorData, case: &NoiseCase, clip: bool) -> Result<TensorData> {
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed());
    let [n, c, h, w] = clean.shape;
    let mut noisy = clean.clone();
    match case {
        NoiseCase::Awgn { sigma, .. } => {
            for v in &mut noisy.data {
                *v += sigma * gaussian(&mut rng);
            }
        }
        NoiseCase::Spatial { map_case, seed } => {
            let map = gen_sigma_map(h, w, *map_case, *seed)?;
            for ni in 0..n {
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            *noisy.at_mut(ni, ci, y, x) +=
                                map.at(0, 0, y, x) * gaussian(&mut rng);
                        }
                    }
                }
            }
        }
    }
    if clip {
        for v in &mut noisy.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(noisy)
}

/// Procedural clean image: gradient + checkerboard + Gaussian blobs,
/// deterministic per id, values in [0,1].
pub fn texture_image(id: u64, h: usize, w: usize) -> TensorData {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0_8085 ^ id.wrapping_mul(0x9E37_79B9));
    let gx: f64 = rng.random_range(-1.0..1.0);
    let gy: f64 = rng.random_range(-1.0..1.0);
    let period = rng.random_range(4..=16) as f64;
    let check_amp: f64 = rng.random_range(0.0..0.5);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(2..=5))
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(2.0..(h.max(w) as f64 / 2.0)),
                rng.random_range(-0.6..0.6),
            )
        })
        .collect();
    let mut img = TensorData::zeros([1, 1, h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.5 + 0.25 * (gx * x as f64 / w as f64 + gy * y as f64 / h as f64);
            let check = ((y as f64 / period).floor() + (x as f64 / period).floor()) % 2.0;
            v += check_amp * (check - 0.5);
            for &(cy, cx, bw, amp) in &blobs {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                v += amp * (-d2 / (2.0 * bw * bw)).exp();
            }
            *img.at_mut(0, 0, y, x) = v.clamp(0.0, 1.0);
        }
    }
    img
}

/// One noisy/clean training pair.
#[derive(Clone, Debug)]
pub struct PatchPair {
    pub noisy: TensorData,
    pub clean: TensorData,
    pub source_id: u64,
    pub crop: (usize, usize),
}

/// Disjoint pair sets for operator-parameter and architecture updates.
pub struct DatasetSplit {
    pub pairs_w: Vec<PatchPair>,
    pub pairs_arch: Vec<PatchPair>,
    pub seed: u64,
    pub manifest: Vec<ManifestEntry>,
}

/// Enough to regenerate one pair exactly.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub source: String,
    pub crop: [usize; 2],
    pub case: String,
    pub seed: u64,
    pub split: String,
}

/// Build `count` patch pairs from procedural sources (or the supplied
/// clean images), split w/arch at `split_ratio`.
pub fn make_dataset(
    sources: &[TensorData],
    patch: usize,
    count: usize,
    split_ratio: f64,
    case: &NoiseCase,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(DenasError::arg("make_dataset", "split_ratio outside [0,1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_w = ((count as f64) * split_ratio).round() as usize;
    let mut pairs_w = vec![];
    let mut pairs_arch = vec![];
    let mut manifest = vec![];
    for i in 0..count {
        let (clean_full, source_label, source_id) = if sources.is_empty() {
            let sid = rng.random_range(0..1024u64);
            (texture_image(sid, patch * 2, patch * 2), format!("texture:{sid}"), sid)
        } else {
            let si = rng.random_range(0..sources.len());
            (sources[si].clone(), format!("image:{si}"), si as u64)
        };
        let [_, _, h, w] = clean_full.shape;
        if h < patch || w < patch {
            return Err(DenasError::arg(
                "make_dataset",
                format!("source {h}x{w} smaller than patch {patch}"),
            ));
        }
        let y0 = rng.random_range(0..=(h - patch));
        let x0 = rng.random_range(0..=(w - patch));
        let mut clean = TensorData::zeros([1, clean_full.shape[1], patch, patch]);
        for c in 0..clean_full.shape[1] {
            for y in 0..patch {
                for x in 0..patch {
                    *clean.at_mut(0, c, y, x) = clean_full.at(0, c, y0 + y, x0 + x);
                }
            }
        }
        let pair_seed = rng.random_range(0..u64::MAX / 2);
        let pair_case = match case {
            NoiseCase::Awgn { sigma, .. } => NoiseCase::Awgn {
                sigma: *sigma,
                seed: pair_seed,
            },
            NoiseCase::Spatial { map_case, .. } => NoiseCase::Spatial {
                map_case: *map_case,
                seed: pair_seed,
            },
        };
        let noisy = add_noise(&clean, &pair_case, false)?;
        let split = if i < n_w { "w" } else { "arch" };
        manifest.push(ManifestEntry {
            source: source_label,
            crop: [y0, x0],
            case: pair_case.label(),
            seed: pair_seed,
            split: split.to_string(),
        });
        let pair = PatchPair {
            noisy,
            clean,
            source_id,
            crop: (y0, x0),
        };
        if i < n_w {
            pairs_w.push(pair);
        } else {
            pairs_arch.push(pair);
        }
    }
    Ok(DatasetSplit {
        pairs_w,
        pairs_arch,
        seed,
        manifest,
    })
}
