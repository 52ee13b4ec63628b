//! Seeded class-latent tasks, one per data source.
//!
//! Every sample carries a hidden class `c`. Images are a per-class prototype
//! plus noise, audio rows likewise; the answer is `(c + shift) mod K` with one
//! shift per modality. Sources of one modality agree; video reuses the image
//! prototypes under a different shift, and every modality pulls the shared
//! decoder head toward its own labelling. That partial disagreement is the
//! gradient conflict the strategy comparison probes.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::model::{ModelConfig, Sample};
use crate::train::plan::{SourceModality, SOURCES};
use crate::vision::ImageInput;

/// Offset separating evaluation indices from training indices.
const EVAL_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone)]
pub struct SyntheticSuite {
    cfg: ModelConfig,
    seed: u64,
    noise: f32,
    image_protos: Vec<Vec<f32>>,
    audio_protos: Vec<Vec<f32>>,
}

/// Closed-form least-squares fit of one task from raw inputs to one-hot
/// answers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleFit {
    pub train_residual: f64,
    pub eval_accuracy: f64,
}

fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a ^ b.rotate_left(21) ^ c.rotate_left(42) ^ 0x5851_f42d_4c95_7f2d;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SyntheticSuite {
    pub fn new(cfg: &ModelConfig, seed: u64, noise: f32) -> Result<Self> {
        cfg.validate()?;
        if !(0.0..0.5).contains(&noise) {
            return Err(Error::config(format!("synthetic noise {noise} must lie in [0, 0.5)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0, 0));
        let pixels = cfg.image_side * cfg.image_side * 3;
        let image_protos =
            (0..cfg.classes).map(|_| (0..pixels).map(|_| rng.random_range(noise..1.0 - noise)).collect()).collect();
        let audio_len = cfg.audio_rows * cfg.audio_dim;
        let audio_protos =
            (0..cfg.classes).map(|_| (0..audio_len).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        Ok(Self { cfg: cfg.clone(), seed, noise, image_protos, audio_protos })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn source_index(source: &str) -> Result<usize> {
        SOURCES
            .iter()
            .position(|(n, _)| *n == source)
            .ok_or_else(|| Error::precondition(format!("no synthetic task registered for source '{source}'")))
    }

    pub fn has_task(&self, source: &str) -> bool {
        Self::source_index(source).is_ok()
    }

    /// The answer token for class `c` under `source`.
    pub fn answer(&self, source: &str, class: usize) -> Result<u32> {
        let shift = match SOURCES[Self::source_index(source)?].1 {
            SourceModality::Image => 0,
            SourceModality::Video => 1,
            SourceModality::Audio => 2,
            SourceModality::VideoAudio => 3,
        };
        Ok(((class + shift) % self.cfg.classes) as u32)
    }

    fn image(&self, class: usize, rng: &mut ChaCha8Rng) -> Result<ImageInput> {
        let side = self.cfg.image_side;
        let data = self.image_protos[class]
            .iter()
            .map(|&p| (p + rng.random_range(-self.noise..=self.noise)).clamp(0.0, 1.0))
            .collect();
        ImageInput::new(Tensor::new(vec![side, side, 3], data)?)
    }

    fn audio(&self, class: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let data =
            self.audio_protos[class].iter().map(|&p| p + rng.random_range(-self.noise..=self.noise) * 2.0).collect();
        Tensor::new(vec![self.cfg.audio_rows, self.cfg.audio_dim], data)
    }

    /// Training sample `index` of `source`; a pure function of the suite seed,
    /// the source and the index.
    pub fn sample(&self, source: &str, index: u64) -> Result<Sample> {
        let idx = Self::source_index(source)?;
        let modality = SOURCES[idx].1;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, idx as u64 + 1, index));
        let class = rng.random_range(0..self.cfg.classes);
        let (frames, audio) = match modality {
            SourceModality::Image => (vec![self.image(class, &mut rng)?], None),
            SourceModality::Video => (vec![self.image(class, &mut rng)?, self.image(class, &mut rng)?], None),
            SourceModality::Audio => (Vec::new(), Some(self.audio(class, &mut rng)?)),
            SourceModality::VideoAudio => {
                (vec![self.image(class, &mut rng)?, self.image(class, &mut rng)?], Some(self.audio(class, &mut rng)?))
            }
        };
        Ok(Sample {
            source: source.to_string(),
            prompt: self.cfg.prompt_token(idx),
            frames,
            audio,
            target: self.answer(source, class)?,
        })
    }

    /// Held-out samples, disjoint from every training index.
    pub fn eval_set(&self, source: &str, n: usize) -> Result<Vec<Sample>> {
        (0..n as u64).map(|i| self.sample(source, EVAL_OFFSET + i)).collect()
    }

    fn raw_features(sample: &Sample) -> Vec<f64> {
        let mut v: Vec<f64> =
            sample.frames.iter().flat_map(|f| f.pixels().data().iter().map(|&x| f64::from(x))).collect();
        if let Some(a) = &sample.audio {
            v.extend(a.data().iter().map(|&x| f64::from(x)));
        }
        v.push(1.0);
        v
    }

    /// Fits raw inputs to one-hot answers by least squares on `n_train`
    /// training samples and scores argmax accuracy on `n_eval` held-out ones.
    pub fn oracle(&self, source: &str, n_train: usize, n_eval: usize) -> Result<OracleFit> {
        let train: Vec<Sample> = (0..n_train as u64).map(|i| self.sample(source, i)).collect::<Result<_>>()?;
        let feats: Vec<Vec<f64>> = train.iter().map(Self::raw_features).collect();
        let width = feats[0].len();
        let k = self.cfg.classes;
        let x = DMatrix::from_fn(n_train, width, |r, c| feats[r][c]);
        let y = DMatrix::from_fn(n_train, k, |r, c| if train[r].target as usize == c { 1.0 } else { 0.0 });
        let w = x
            .clone()
            .svd(true, true)
            .solve(&y, 1e-9)
            .map_err(|e| Error::Numeric(format!("least-squares oracle failed: {e}")))?;
        let residual = (&x * &w - &y).norm_squared() / n_train as f64;
        let eval = self.eval_set(source, n_eval)?;
        let correct = eval
            .iter()
            .filter(|s| {
                let f = Self::raw_features(s);
                let row = DMatrix::from_row_slice(1, width, &f) * &w;
                let best = (0..k).max_by(|&a, &b| row[(0, a)].total_cmp(&row[(0, b)])).expect("k ≥ 2");
                best == s.target as usize
            })
            .count();
        Ok(OracleFit { train_residual: residual, eval_accuracy: correct as f64 / n_eval.max(1) as f64 })
    }

    /// Oracle fits for a set of sources.
    pub fn oracles<'a>(&self, sources: impl IntoIterator<Item = &'a str>) -> Result<BTreeMap<String, OracleFit>> {
        sources.into_iter().map(|s| Ok((s.to_string(), self.oracle(s, 64, 64)?))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn suite() -> SyntheticSuite {
        SyntheticSuite::new(&ModelConfig::default(), 9, 0.1).unwrap()
    }

    #[test]
    fn samples_are_deterministic_and_shaped() {
        let s = suite();
        assert_eq!(s.sample("video-audio", 3).unwrap(), s.sample("video-audio", 3).unwrap());
        assert_ne!(s.sample("video-audio", 3).unwrap(), s.sample("video-audio", 4).unwrap());
        let v = s.sample("video-audio", 0).unwrap();
        assert_eq!(v.frames.len(), 2);
        assert_eq!(v.audio.as_ref().unwrap().shape(), [3, 8]);
        assert!(s.sample("image-caption", 0).unwrap().audio.is_none());
        assert!(s.sample("speech-asr", 0).unwrap().frames.is_empty());
        assert!(s.sample("nope", 0).is_err());
    }

    #[test]
    fn modalities_disagree_on_answers() {
        let s = suite();
        assert_ne!(s.sample("image-caption", 7).unwrap().prompt, s.sample("image-text", 7).unwrap().prompt);
        for c in 0..4 {
            assert_eq!(s.answer("image-caption", c).unwrap(), s.answer("image-text", c).unwrap());
            assert_ne!(s.answer("image-caption", c).unwrap(), s.answer("video", c).unwrap());
            assert_ne!(s.answer("audio", c).unwrap(), s.answer("video-audio", c).unwrap());
        }
    }

    #[test]
    fn linear_oracle_solves_every_task() {
        let s = suite();
        for (source, _) in SOURCES {
            let fit = s.oracle(source, 64, 64).unwrap();
            assert!(fit.eval_accuracy > 0.95, "{source}: {fit:?}");
        }
    }

    #[test]
    fn eval_indices_are_disjoint() {
        let s = suite();
        let eval = s.eval_set("audio", 4).unwrap();
        let train: Vec<Sample> = (0..4).map(|i| s.sample("audio", i).unwrap()).collect();
        assert!(eval.iter().all(|e| !train.contains(e)));
    }
}
