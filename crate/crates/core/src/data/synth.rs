//! Synthetic head CT corpus: a noisy skull and brain with label-specific
//! hyperdense ellipses, windowed like real slices. Deterministic per seed.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{window_value, write_manifest, write_sfi, DataError, Manifest, ManifestEntry, DEFAULT_WINDOWS, NUM_LABELS};
use crate::tensor::Tensor;

/// Probability each subtype label is present.
pub const POSITIVE_RATE: f64 = 0.3;

/// Attenuation of each subtype's lesion (labels 1..=5).
pub const LESION_HU: [f64; 5] = [75.0, 65.0, 55.0, 85.0, 95.0];

/// Lesion centres in `[-1, 1]²` (x, y).
const LESION_AT: [(f64, f64); 5] = [(-0.45, -0.45), (0.4, -0.2), (0.0, 0.05), (0.0, 0.5), (-0.55, 0.2)];

const BRAIN_HU: f64 = 30.0;
const BONE_HU: f64 = 900.0;
const AIR_HU: f64 = -1000.0;
const NOISE_SD: f64 = 5.0;

#[derive(Clone, Debug)]
pub struct SynthSample {
    pub id: String,
    pub image: Tensor,
    pub labels: [u8; NUM_LABELS],
}

/// Renders one `[size, size, 3]` sample from `rng`.
pub fn render_sample(size: usize, rng: &mut ChaCha8Rng) -> (Tensor, [u8; NUM_LABELS]) {
    let mut labels = [0u8; NUM_LABELS];
    for l in labels.iter_mut().skip(1) {
        *l = u8::from(rng.gen_bool(POSITIVE_RATE));
    }
    labels[0] = u8::from(labels[1..].contains(&1));
    let jitter: Vec<(f64, f64)> = (0..5)
        .map(|_| (rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)))
        .collect();
    let noise = Normal::new(0.0, NOISE_SD).expect("positive sd");

    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let v = (y as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let r = (u * u + v * v).sqrt();
            let mut hu = if r > 0.85 {
                AIR_HU
            } else if r > 0.76 {
                BONE_HU
            } else {
                BRAIN_HU
            };
            if r <= 0.76 {
                for (k, &(cx, cy)) in LESION_AT.iter().enumerate() {
                    if labels[k + 1] == 0 {
                        continue;
                    }
                    let du = (u - cx - jitter[k].0) / 0.2;
                    let dv = (v - cy - jitter[k].1) / 0.14;
                    if du * du + dv * dv <= 1.0 {
                        hu = hu.max(LESION_HU[k]);
                    }
                }
            }
            hu += noise.sample(rng);
            data.extend(DEFAULT_WINDOWS.iter().map(|&w| window_value(hu, w)));
        }
    }
    let image = Tensor::new(vec![size, size, 3], data).expect("shape matches data");
    (image, labels)
}

/// In-memory corpus: sample `i` is drawn from stream `i` of `seed`.
pub fn synth_samples(count: usize, size: usize, seed: u64) -> Vec<SynthSample> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let (image, labels) = render_sample(size, &mut rng);
            SynthSample {
                id: format!("synth{i:05}"),
                image,
                labels,
            }
        })
        .collect()
}

/// Writes `images/*.sfi` and `manifest.jsonl` under `out_dir`.
pub fn synth_generate(count: usize, size: usize, seed: u64, out_dir: &Path) -> Result<Manifest, DataError> {
    if count == 0 || size == 0 {
        return Err(DataError::Invalid("synthetic corpus needs count > 0 and size > 0".into()));
    }
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| DataError::io(&images, e))?;
    let mut entries = Vec::with_capacity(count);
    for s in synth_samples(count, size, seed) {
        let rel = Path::new("images").join(format!("{}.sfi", s.id));
        write_sfi(&out_dir.join(&rel), &s.image)?;
        entries.push(ManifestEntry {
            id: s.id,
            path: rel,
            labels: s.labels.to_vec(),
        });
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &entries)?;
    Ok(Manifest {
        root: out_dir.to_path_buf(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn any_is_or_of_subtypes() {
        for s in synth_samples(50, 16, 3) {
            assert_eq!(s.labels[0] == 1, s.labels[1..].contains(&1));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn deterministic() {
        let a = synth_samples(3, 16, 9);
        let b = synth_samples(3, 16, 9);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.image.bit_eq(&y.image));
            assert_eq!(x.labels, y.labels);
        }
    }
}
