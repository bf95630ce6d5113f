//! Offline posterior evaluation: reconstruction error split into object and
//! background pixels, plus segmentation agreement for the object decoder.
//! Expected-mode latents make every number deterministic.

use super::{SampleMode, SequenceBatch, WorldModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Pixel-space error of posterior reconstructions over a sequence batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconReport {
    /// MSE over pixels whose ground-truth label names an object.
    pub object_mse: f64,
    /// MSE over background pixels.
    pub background_mse: f64,
    /// MSE over every pixel.
    pub full_mse: f64,
    /// Fraction of pixels whose predicted slot matches the label
    /// (object decoder only).
    pub segmentation_accuracy: Option<f64>,
    /// Pixels behind `object_mse`; zero means the batch shows no objects.
    pub object_pixels: usize,
    /// MSE per ground-truth slot (index 0 is the background).
    pub slot_mse: Vec<f64>,
    /// Channel-elements behind each entry of `slot_mse`.
    pub slot_pixels: Vec<usize>,
}

impl WorldModel {
    /// Filter the batch with expected posteriors and measure reconstruction
    /// error against the ground-truth frames.
    pub fn reconstruction_errors(&self, batch: &SequenceBatch) -> Result<ReconReport> {
        if batch.seq_len == 0 || batch.batch_size == 0 {
            return Err(Error::contract("reconstruction eval needs a non-empty batch"));
        }
        // expected mode never consumes randomness; the seed is irrelevant
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c, hw) = (self.channels(), self.image_size() * self.image_size());
        let b = batch.batch_size;

        let mut obj_se = 0.0;
        let mut obj_n = 0usize;
        let mut bg_se = 0.0;
        let mut bg_n = 0usize;
        let mut slot_se = vec![0.0; self.num_slots()];
        let mut slot_n = vec![0usize; self.num_slots()];
        let mut seg_hits = 0usize;
        let mut seg_total = 0usize;
        let object_decoder = self.decoder_kind() == super::DecoderKind::Object;

        let mut state = self.initial_state(b);
        for t in 0..batch.seq_len {
            let img = Tensor::constant(batch.images[t].clone());
            let prop = Tensor::constant(batch.proprios[t].clone());
            let act = Tensor::constant(batch.actions[t].clone());
            let embed = self.encode(&img, &prop)?;
            let (post, _) =
                self.posterior_step(&state, &act, &embed, &mut rng, SampleMode::Expected)?;
            state = post.detached();
            let feat = state.feature();
            let recon = self.predict_image(&feat)?;
            let target = &batch.images[t];
            let labels = &batch.labels[t];
            for bi in 0..b {
                for p in 0..hw {
                    let label = labels[bi * hw + p];
                    let mut se = 0.0;
                    for ci in 0..c {
                        let (h, w) = (p / self.image_size(), p % self.image_size());
                        let d = recon[[bi, ci, h, w]] - target[[bi, ci, h, w]];
                        se += d * d;
                    }
                    if label > 0 {
                        obj_se += se;
                        obj_n += c;
                    } else {
                        bg_se += se;
                        bg_n += c;
                    }
                    if label < slot_se.len() {
                        slot_se[label] += se;
                        slot_n[label] += c;
                    }
                }
            }
            if object_decoder {
                let seg = self.predict_segmentation(&feat)?;
                for bi in 0..b {
                    for p in 0..hw {
                        if seg[[bi, p]] == labels[bi * hw + p] {
                            seg_hits += 1;
                        }
                        seg_total += 1;
                    }
                }
            }
        }

        let full_mse = (obj_se + bg_se) / (obj_n + bg_n) as f64;
        let slot_mse = slot_se
            .iter()
            .zip(&slot_n)
            .map(|(&se, &n)| if n > 0 { se / n as f64 } else { 0.0 })
            .collect();
        Ok(ReconReport {
            object_mse: if obj_n > 0 { obj_se / obj_n as f64 } else { 0.0 },
            background_mse: if bg_n > 0 { bg_se / bg_n as f64 } else { 0.0 },
            full_mse,
            segmentation_accuracy: object_decoder.then(|| seg_hits as f64 / seg_total as f64),
            object_pixels: obj_n,
            slot_mse,
            slot_pixels: slot_n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::{random_batch, tiny_cfg, tiny_scene};
    use super::*;
    use crate::config::ACTION_DIM;
    use crate::wm::DecoderKind;

    #[test]
    fn recon_errors_are_deterministic_and_bucketed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny_cfg();
        let scene = tiny_scene();
        let wm = WorldModel::new(&mut rng, &cfg, &scene, ACTION_DIM, DecoderKind::Object).unwrap();
        let batch = random_batch(5, 3, 2, &scene);
        let a = wm.reconstruction_errors(&batch).unwrap();
        let b = wm.reconstruction_errors(&batch).unwrap();
        assert_eq!(a.full_mse, b.full_mse);
        assert_eq!(a.object_mse, b.object_mse);
        assert!(a.full_mse.is_finite() && a.full_mse >= 0.0);
        assert!(a.segmentation_accuracy.is_some());

        // full error is a pixel-weighted mix of the two buckets
        let hw = wm.image_size() * wm.image_size();
        let n = (batch.seq_len * batch.batch_size * wm.channels() * hw) as f64;
        let total = a.object_pixels as f64 * a.object_mse
            + (n - a.object_pixels as f64) * a.background_mse;
        assert!((total / n - a.full_mse).abs() < 1e-12);

        // per-slot errors partition the same total
        assert_eq!(a.slot_mse.len(), wm.num_slots());
        let slot_total: f64 = a
            .slot_mse
            .iter()
            .zip(&a.slot_pixels)
            .map(|(&mse, &n)| mse * n as f64)
            .sum();
        assert!((slot_total / n - a.full_mse).abs() < 1e-12);
        assert_eq!(a.slot_pixels.iter().sum::<usize>(), n as usize);
        assert_eq!(a.slot_pixels[1..].iter().sum::<usize>(), a.object_pixels);
    }

    #[test]
    fn monolithic_reports_no_segmentation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = tiny_cfg();
        let scene = tiny_scene();
        let wm =
            WorldModel::new(&mut rng, &cfg, &scene, ACTION_DIM, DecoderKind::Monolithic).unwrap();
        let batch = random_batch(6, 2, 2, &scene);
        let r = wm.reconstruction_errors(&batch).unwrap();
        assert!(r.segmentation_accuracy.is_none());
        assert!(r.full_mse.is_finite());
    }
}
