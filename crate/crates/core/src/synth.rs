//! Labelled synthetic hyperspectral cubes with controllable class separation.
//!
//! Each class gets a smooth reflectance spectrum. A cube is a blobby
//! foreground region (the "kernels") carrying that spectrum, modulated by a
//! low-frequency multiplicative texture and Gaussian noise, over a near-zero
//! background.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cubeio::{
    save_cube, split_dataset, DatasetManifest, HyperCube, LabeledCube, ManifestEntry,
};
use crate::error::{Error, Result};
use crate::par;

const SIGNATURE_RETRIES: usize = 5000;
const BACKGROUND_LEVEL: f64 = 0.02;
const OUTLIER_NOISE_FACTOR: f64 = 5.0;
const BAND_START_NM: f64 = 900.0;
const BAND_END_NM: f64 = 1700.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    pub class_index: usize,
    pub name: String,
    pub spectrum: Vec<f64>,
    pub spatial_texture_scale: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub cubes_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Minimum pairwise Euclidean distance between class spectra.
    pub separation: f64,
    /// Target fraction of foreground pixels per cube.
    pub foreground_fill: f64,
    pub noise_sigma: f64,
    pub texture_scale: f64,
    /// Fraction of cubes generated with `5 * noise_sigma`.
    pub outlier_rate: f64,
    pub per_class_train: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            cubes_per_class: 45,
            height: 16,
            width: 16,
            channels: 32,
            separation: 0.5,
            foreground_fill: 0.6,
            noise_sigma: 0.05,
            texture_scale: 0.1,
            outlier_rate: 0.0,
            per_class_train: 30,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_classes", self.num_classes),
            ("cubes_per_class", self.cubes_per_class),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::arg(format!("{name} must be at least 1")));
        }
        if !(self.foreground_fill > 0.0 && self.foreground_fill <= 1.0) {
            return Err(Error::arg("foreground_fill must lie in (0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.texture_scale >= 0.0 && self.separation >= 0.0) {
            return Err(Error::arg(
                "noise_sigma, texture_scale and separation must be nonnegative",
            ));
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return Err(Error::arg("outlier_rate must lie in [0, 1]"));
        }
        if self.per_class_train > self.cubes_per_class {
            return Err(Error::arg(format!(
                "per_class_train {} exceeds cubes_per_class {}",
                self.per_class_train, self.cubes_per_class
            )));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(class_name).collect()
    }
}

pub fn class_name(k: usize) -> String {
    format!("class{k:02}")
}

/// SplitMix64 finalizer, used to derive independent per-cube seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn cube_seed(seed: u64, class: usize, index: usize) -> u64 {
    mix(mix(mix(seed) ^ class as u64) ^ index as u64)
}

fn random_spectrum(rng: &mut ChaCha8Rng, channels: usize) -> Vec<f64> {
    let base = rng.random_range(0.15..0.6);
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let amp = rng.random_range(-0.35..0.35);
            let center = rng.random_range(0.0..channels as f64);
            let width = rng
                .random_range(channels as f64 / 12.0..channels as f64 / 4.0)
                .max(0.5);
            (amp, center, width)
        })
        .collect();
    (0..channels)
        .map(|c| {
            let x = c as f64;
            let v = base
                + bumps
                    .iter()
                    .map(|(a, m, w)| a * (-(x - m).powi(2) / (2.0 * w * w)).exp())
                    .sum::<f64>();
            v.clamp(0.0, 1.0)
        })
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Draws one spectrum per class such that every pair is at least
/// `config.separation` apart.
pub fn gen_signatures(config: &SynthConfig) -> Result<Vec<ClassSignature>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed ^ 0x5157_4e41_5455_5245));
    let mut spectra: Vec<Vec<f64>> = Vec::with_capacity(config.num_classes);
    for k in 0..config.num_classes {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..SIGNATURE_RETRIES {
            let cand = random_spectrum(&mut rng, config.channels);
            let nearest = spectra
                .iter()
                .map(|s| distance(s, &cand))
                .fold(f64::INFINITY, f64::min);
            if nearest >= config.separation {
                best = Some((nearest, cand));
                break;
            }
            if best.as_ref().is_none_or(|(d, _)| nearest > *d) {
                best = Some((nearest, cand));
            }
        }
        let (nearest, spectrum) = best.expect("at least one candidate drawn");
        if nearest < config.separation {
            return Err(Error::Generation(format!(
                "class {k}: best achieved separation {nearest:.4} is below the requested {:.4} \
                 after {SIGNATURE_RETRIES} draws",
                config.separation
            )));
        }
        spectra.push(spectrum);
    }
    Ok(spectra
        .into_iter()
        .enumerate()
        .map(|(k, spectrum)| ClassSignature {
            class_index: k,
            name: class_name(k),
            spectrum,
            spatial_texture_scale: config.texture_scale,
            noise_sigma: config.noise_sigma,
        })
        .collect())
}

/// A smooth random field: a sum of a few low-frequency plane waves,
/// normalized to `[-1, 1]`.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let fy = rng.random_range(0.5..2.5) / h as f64;
            let fx = rng.random_range(0.5..2.5) / w as f64;
            (fy, fx, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let mut field: Vec<f64> = (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            waves
                .iter()
                .map(|(fy, fx, ph)| (2.0 * PI * (fy * r + fx * c) + ph).cos())
                .sum()
        })
        .collect();
    let peak = field.iter().fold(0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        field.iter_mut().for_each(|v| *v /= peak);
    }
    field
}

/// Foreground mask covering `round(fill * H * W)` pixels (at least one),
/// chosen as the top of a smooth random field so that it forms blobs.
fn blob_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, fill: f64) -> Vec<bool> {
    let field = smooth_field(rng, h, w);
    let n = h * w;
    let target = ((fill * n as f64).round() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut mask = vec![false; n];
    for &i in &order[..target] {
        mask[i] = true;
    }
    mask
}

fn band_centers(channels: usize) -> Vec<f64> {
    if channels == 1 {
        return vec![(BAND_START_NM + BAND_END_NM) / 2.0];
    }
    let step = (BAND_END_NM - BAND_START_NM) / (channels - 1) as f64;
    (0..channels)
        .map(|c| BAND_START_NM + step * c as f64)
        .collect()
}

/// Renders one cube of class `sig`.
///
/// `outlier` multiplies the noise level by five.
pub fn gen_cube(
    sig: &ClassSignature,
    height: usize,
    width: usize,
    foreground_fill: f64,
    outlier: bool,
    seed: u64,
) -> Result<LabeledCube> {
    let channels = sig.spectrum.len();
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::arg("cube dimensions must be positive"));
    }
    if !(sig.noise_sigma >= 0.0) || !(sig.spatial_texture_scale >= 0.0) {
        return Err(Error::arg(
            "noise_sigma and texture scale must be nonnegative",
        ));
    }
    if !(foreground_fill > 0.0 && foreground_fill <= 1.0) {
        return Err(Error::arg("foreground_fill must lie in (0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = blob_mask(&mut rng, height, width, foreground_fill);
    let texture = smooth_field(&mut rng, height, width);
    let sigma = sig.noise_sigma * if outlier { OUTLIER_NOISE_FACTOR } else { 1.0 };
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");

    let n = height * width;
    let mut data = Vec::with_capacity(n * channels);
    for &level in &sig.spectrum {
        for (p, &fg) in mask.iter().enumerate() {
            let v = if fg {
                let t = 1.0 + sig.spatial_texture_scale * texture[p];
                let eps = if sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                level * t + eps
            } else {
                BACKGROUND_LEVEL * rng.random::<f64>()
            };
            data.push(v as f32);
        }
    }
    let cube = HyperCube::new(height, width, channels, data)?
        .with_band_centers(band_centers(channels))?
        .with_mask(mask)?;
    Ok(LabeledCube {
        id: format!("{}_{seed:016x}", sig.name),
        cube,
        label: sig.name.clone(),
        label_index: sig.class_index,
    })
}

/// Generates every cube of the dataset in memory, class-major.
pub fn generate_from_signatures(
    config: &SynthConfig,
    signatures: &[ClassSignature],
) -> Result<Vec<LabeledCube>> {
    config.validate()?;
    let per = config.cubes_per_class;
    let cubes = par::map_range(signatures.len() * per, |j| {
        let (k, i) = (j / per, j % per);
        let seed = cube_seed(config.seed, k, i);
        let mut flip = ChaCha8Rng::seed_from_u64(mix(seed ^ 0x6f75_746c_6965_7273));
        let outlier = flip.random::<f64>() < config.outlier_rate;
        gen_cube(
            &signatures[k],
            config.height,
            config.width,
            config.foreground_fill,
            outlier,
            seed,
        )
        .map(|mut c| {
            c.id = format!("{}_{i:04}", signatures[k].name);
            c
        })
    });
    cubes.into_iter().collect()
}

pub fn generate(config: &SynthConfig) -> Result<(Vec<ClassSignature>, Vec<LabeledCube>)> {
    let sigs = gen_signatures(config)?;
    let cubes = generate_from_signatures(config, &sigs)?;
    Ok((sigs, cubes))
}

/// Output of [`gen_dataset`].
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub signatures: Vec<ClassSignature>,
    pub all: DatasetManifest,
    pub train: DatasetManifest,
    pub test: DatasetManifest,
}

/// Writes a balanced dataset under `dir`: cubes in `dir/cubes/`, plus
/// `all.json`, `train.json`, `test.json` manifests and `signatures.json`.
pub fn gen_dataset(config: &SynthConfig, dir: impl AsRef<Path>) -> Result<GeneratedDataset> {
    let dir = dir.as_ref();
    let (signatures, cubes) = generate(config)?;
    let cube_dir = dir.join("cubes");
    fs::create_dir_all(&cube_dir).map_err(|e| Error::io(&cube_dir, e))?;

    let written = par::map(&cubes, |c| {
        let rel = format!("cubes/{}.hsc", c.id);
        save_cube(&c.cube, dir.join(&rel), Some(&c.label)).map(|_| ManifestEntry {
            path: rel,
            label: c.label.clone(),
            label_index: c.label_index,
        })
    });
    let entries = written.into_iter().collect::<Result<Vec<_>>>()?;

    let classes = config.class_names();
    let provenance = serde_json::to_value(config)?;
    let with_prov = |mut m: DatasetManifest| {
        m.balanced = true;
        m.provenance.insert("source".into(), "synthgen".into());
        m.provenance
            .insert("synth_config".into(), provenance.clone());
        m
    };
    let all = with_prov(DatasetManifest::new(
        "all",
        classes.clone(),
        entries.clone(),
    ));
    let (train, test) = split_dataset(entries, &classes, config.per_class_train, config.seed)?;
    let train = with_prov(DatasetManifest::new("train", classes.clone(), train));
    let test = with_prov(DatasetManifest::new("test", classes, test));

    for (name, m) in [
        ("all.json", &all),
        ("train.json", &train),
        ("test.json", &test),
    ] {
        m.save(dir.join(name))?;
    }
    let sp = dir.join("signatures.json");
    fs::write(&sp, serde_json::to_string_pretty(&signatures)?).map_err(|e| Error::io(&sp, e))?;

    Ok(GeneratedDataset {
        signatures,
        all,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cubeio::foreground_fraction;

    fn small() -> SynthConfig {
        SynthConfig {
            num_classes: 3,
            cubes_per_class: 4,
            height: 8,
            width: 8,
            channels: 6,
            per_class_train: 2,
            separation: 0.1,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_separation_accepts_anything() {
        let cfg = SynthConfig {
            num_classes: 2,
            separation: 0.0,
            ..small()
        };
        assert_eq!(gen_signatures(&cfg).unwrap().len(), 2);
    }

    #[test]
    fn signatures_are_deterministic() {
        assert_eq!(
            gen_signatures(&small()).unwrap(),
            gen_signatures(&small()).unwrap()
        );
        let other = SynthConfig { seed: 9, ..small() };
        assert_ne!(
            gen_signatures(&small()).unwrap(),
            gen_signatures(&other).unwrap()
        );
    }

    #[test]
    fn eight_classes_separated() {
        let cfg = SynthConfig {
            num_classes: 8,
            channels: 32,
            separation: 0.5,
            ..small()
        };
        let sigs = gen_signatures(&cfg).unwrap();
        assert_eq!(sigs.len(), 8);
        for i in 0..8 {
            for j in 0..i {
                let d: f64 = sigs[i]
                    .spectrum
                    .iter()
                    .zip(&sigs[j].spectrum)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(d >= 0.5, "classes {i},{j} only {d} apart");
            }
        }
    }

    #[test]
    fn infeasible_separation_reports_achieved() {
        let cfg = SynthConfig {
            num_classes: 4,
            channels: 2,
            separation: 5.0,
            ..small()
        };
        match gen_signatures(&cfg) {
            Err(Error::Generation(msg)) => assert!(msg.contains("best achieved separation")),
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn noiseless_foreground_equals_spectrum() {
        let sig = ClassSignature {
            class_index: 1,
            name: "k".into(),
            spectrum: vec![0.1, 0.5, 0.9],
            spatial_texture_scale: 0.0,
            noise_sigma: 0.0,
        };
        let lc = gen_cube(&sig, 6, 5, 0.5, false, 3).unwrap();
        assert_eq!(lc.label_index, 1);
        let mask = lc.cube.mask().unwrap();
        for c in 0..3 {
            for (p, &fg) in mask.iter().enumerate() {
                let v = lc.cube.band(c)[p];
                if fg {
                    assert_eq!(v, sig.spectrum[c] as f32);
                } else {
                    assert!((0.0..BACKGROUND_LEVEL as f32).contains(&v));
                }
            }
        }
    }

    #[test]
    fn mask_fill_within_ten_percent_over_100_seeds() {
        let sig = ClassSignature {
            class_index: 0,
            name: "k".into(),
            spectrum: vec![0.5; 4],
            spatial_texture_scale: 0.2,
            noise_sigma: 0.05,
        };
        for seed in 0..100 {
            let lc = gen_cube(&sig, 16, 16, 0.6, false, seed).unwrap();
            let f = foreground_fraction(&lc.cube).unwrap();
            assert!((f - 0.6).abs() <= 0.1, "seed {seed}: fill {f}");
        }
    }

    #[test]
    fn seeds_change_raster_not_label() {
        let sigs = gen_signatures(&small()).unwrap();
        let a = gen_cube(&sigs[2], 8, 8, 0.6, false, 1).unwrap();
        let b = gen_cube(&sigs[2], 8, 8, 0.6, false, 2).unwrap();
        assert_ne!(a.cube, b.cube);
        assert_eq!(a.label, b.label);
        assert_eq!(gen_cube(&sigs[2], 8, 8, 0.6, false, 1).unwrap(), a);
    }

    #[test]
    fn foreground_mean_converges_to_signature() {
        let sig = ClassSignature {
            class_index: 0,
            name: "k".into(),
            spectrum: vec![0.2, 0.4, 0.7, 0.3],
            spatial_texture_scale: 0.0,
            noise_sigma: 0.1,
        };
        let (mut sum, mut n) = (vec![0f64; 4], 0usize);
        for seed in 0..40 {
            let lc = gen_cube(&sig, 8, 8, 0.5, false, seed).unwrap();
            let mask = lc.cube.mask().unwrap();
            for c in 0..4 {
                for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    sum[c] += f64::from(lc.cube.band(c)[p]);
                    if c == 0 {
                        n += 1;
                    }
                }
            }
        }
        for c in 0..4 {
            let mean = sum[c] / n as f64;
            let tol = 3.0 * sig.noise_sigma / (n as f64).sqrt();
            assert!((mean - sig.spectrum[c]).abs() <= tol, "channel {c}: {mean}");
        }
    }

    #[test]
    fn dataset_on_disk() {
        let cfg = SynthConfig {
            num_classes: 8,
            cubes_per_class: 45,
            per_class_train: 30,
            height: 4,
            width: 4,
            channels: 8,
            separation: 0.2,
            ..SynthConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = gen_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(out.train.entries.len(), 240);
        assert_eq!(out.test.entries.len(), 120);
        assert_eq!(out.train.classes, cfg.class_names());
        let names: Vec<_> = out.signatures.iter().map(|s| s.name.clone()).collect();
        assert_eq!(names, out.train.classes);

        let loaded = DatasetManifest::load(dir.path().join("test.json")).unwrap();
        let ds = loaded.load_dataset(dir.path()).unwrap();
        let (_, cubes) = generate(&cfg).unwrap();
        for item in &ds.items {
            let orig = cubes
                .iter()
                .find(|c| {
                    c.id == *item
                        .id
                        .trim_start_matches("cubes/")
                        .trim_end_matches(".hsc")
                })
                .unwrap();
            assert_eq!(orig.cube, item.cube);
        }
    }

    #[test]
    fn dataset_bytes_are_deterministic() {
        let cfg = small();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        gen_dataset(&cfg, a.path()).unwrap();
        gen_dataset(&cfg, b.path()).unwrap();
        for entry in fs::read_dir(a.path().join("cubes")).unwrap() {
            let name = entry.unwrap().file_name();
            let x = fs::read(a.path().join("cubes").join(&name)).unwrap();
            let y = fs::read(b.path().join("cubes").join(&name)).unwrap();
            assert_eq!(x, y);
        }
        for m in ["train.json", "test.json", "all.json"] {
            assert_eq!(
                fs::read(a.path().join(m)).unwrap(),
                fs::read(b.path().join(m)).unwrap()
            );
        }
    }
}
