//! The trainable toy model: patch embedder, pooling scorer, two connectors
//! and the embedding-level decoder, with a full per-sample backward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{assemble, project_audio, project_video, MarkerRole, Part, TokenItem};
use crate::tensor::{Activation, Tensor};
use crate::train::decoder::ToyDecoder;
use crate::train::plan::ParamGroup;
use crate::vision::{
    extract_patches, local_global_pool, local_global_pool_backward, ImageInput, PatchEmbedder, PatchGrid, PoolScorer,
};

/// Toy dimensions for training runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch: usize,
    /// Side of the square synthetic images.
    pub image_side: usize,
    pub vision_dim: usize,
    pub llm_dim: usize,
    pub connector_hidden: usize,
    pub decoder_hidden: usize,
    /// Width of the synthetic audio token rows fed to the audio connector.
    pub audio_dim: usize,
    pub audio_rows: usize,
    pub classes: usize,
    pub vocab: usize,
    pub budget: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            image_side: 8,
            vision_dim: 8,
            llm_dim: 16,
            connector_hidden: 32,
            decoder_hidden: 32,
            audio_dim: 8,
            audio_rows: 3,
            classes: 4,
            vocab: 16,
            budget: 16384,
            seed: 5,
        }
    }
}

impl ModelConfig {
    /// Text ids: answers `0..classes`, one prompt per data source, then the
    /// query token.
    pub fn prompt_token(&self, source_index: usize) -> u32 {
        (self.classes + source_index) as u32
    }

    pub fn query_token(&self) -> u32 {
        (self.classes + crate::train::plan::SOURCES.len()) as u32
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch", self.patch),
            ("image_side", self.image_side),
            ("vision_dim", self.vision_dim),
            ("llm_dim", self.llm_dim),
            ("connector_hidden", self.connector_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("audio_dim", self.audio_dim),
            ("audio_rows", self.audio_rows),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be positive")));
        }
        if !self.image_side.is_multiple_of(2 * self.patch) {
            return Err(Error::config("model.image_side must be a multiple of 2·patch"));
        }
        if self.classes < 2 {
            return Err(Error::config("model.classes must be at least 2"));
        }
        if self.vocab <= self.query_token() as usize {
            return Err(Error::config(format!(
                "model.vocab must exceed {} (answers, prompts and query)",
                self.query_token()
            )));
        }
        Ok(())
    }
}

/// One training example: a prompt token, optional frames and audio rows, and
/// the answer token predicted after the query token.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub source: String,
    pub prompt: u32,
    pub frames: Vec<ImageInput>,
    pub audio: Option<Tensor>,
    pub target: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmniModel {
    pub cfg: ModelConfig,
    pub embedder: PatchEmbedder,
    pub scorer: PoolScorer,
    pub visual_connector: crate::fusion::Connector,
    pub audio_connector: crate::fusion::Connector,
    /// `[vocab × D]`.
    pub text_embed: Tensor,
    /// `[8 × D]`, indexed by marker role.
    pub marker_embed: Tensor,
    pub decoder: ToyDecoder,
}

/// Gradients aligned with [`OmniModel::params`].
#[derive(Debug, Clone)]
pub struct ModelGrads(pub Vec<Tensor>);

impl ModelGrads {
    pub fn zeros_like(model: &OmniModel) -> Self {
        Self(model.params().iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect())
    }

    pub fn accumulate(&mut self, other: &ModelGrads, scale: f32) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }
}

impl OmniModel {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let sub = |k: u64| cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(k);
        let d = cfg.llm_dim;
        Ok(Self {
            cfg: cfg.clone(),
            embedder: PatchEmbedder::seeded(cfg.patch, cfg.vision_dim, sub(1)),
            scorer: PoolScorer::seeded(cfg.vision_dim, Activation::Gelu, sub(2)),
            visual_connector: crate::fusion::Connector::seeded(cfg.vision_dim, cfg.connector_hidden, d, sub(3)),
            audio_connector: crate::fusion::Connector::seeded(cfg.audio_dim, cfg.connector_hidden, d, sub(4)),
            text_embed: Tensor::uniform(&[cfg.vocab, d], 1.0, &mut rng),
            marker_embed: Tensor::uniform(&[MarkerRole::ALL.len(), d], 1.0, &mut rng),
            decoder: ToyDecoder::random(d, cfg.decoder_hidden, cfg.vocab, &mut rng),
        })
    }

    /// Every parameter tensor with its group and a stable name.
    pub fn params(&self) -> Vec<(ParamGroup, &'static str, &Tensor)> {
        use ParamGroup::*;
        let b = &self.decoder.block;
        vec![
            (VisionEmbedder, "embedder.weight", &self.embedder.weight),
            (VisionEmbedder, "embedder.bias", &self.embedder.bias),
            (VisionPooler, "scorer.weight1", &self.scorer.weight1),
            (VisionPooler, "scorer.bias1", &self.scorer.bias1),
            (VisualConnector, "visual.weight1", &self.visual_connector.weight1),
            (VisualConnector, "visual.bias1", &self.visual_connector.bias1),
            (VisualConnector, "visual.weight2", &self.visual_connector.weight2),
            (VisualConnector, "visual.bias2", &self.visual_connector.bias2),
            (AudioConnector, "audio.weight1", &self.audio_connector.weight1),
            (AudioConnector, "audio.bias1", &self.audio_connector.bias1),
            (AudioConnector, "audio.weight2", &self.audio_connector.weight2),
            (AudioConnector, "audio.bias2", &self.audio_connector.bias2),
            (Decoder, "decoder.text_embed", &self.text_embed),
            (Decoder, "decoder.marker_embed", &self.marker_embed),
            (Decoder, "decoder.wq", &b.wq),
            (Decoder, "decoder.wk", &b.wk),
            (Decoder, "decoder.wv", &b.wv),
            (Decoder, "decoder.wo", &b.wo),
            (Decoder, "decoder.w1", &b.w1),
            (Decoder, "decoder.b1", &b.b1),
            (Decoder, "decoder.w2", &b.w2),
            (Decoder, "decoder.b2", &b.b2),
            (Decoder, "decoder.head", &self.decoder.head),
            (Decoder, "decoder.head_bias", &self.decoder.head_bias),
        ]
    }

    /// Mutable view in the same order as [`OmniModel::params`].
    pub fn params_mut(&mut self) -> Vec<(ParamGroup, &mut Tensor)> {
        use ParamGroup::*;
        let b = &mut self.decoder.block;
        vec![
            (VisionEmbedder, &mut self.embedder.weight),
            (VisionEmbedder, &mut self.embedder.bias),
            (VisionPooler, &mut self.scorer.weight1),
            (VisionPooler, &mut self.scorer.bias1),
            (VisualConnector, &mut self.visual_connector.weight1),
            (VisualConnector, &mut self.visual_connector.bias1),
            (VisualConnector, &mut self.visual_connector.weight2),
            (VisualConnector, &mut self.visual_connector.bias2),
            (AudioConnector, &mut self.audio_connector.weight1),
            (AudioConnector, &mut self.audio_connector.bias1),
            (AudioConnector, &mut self.audio_connector.weight2),
            (AudioConnector, &mut self.audio_connector.bias2),
            (Decoder, &mut self.text_embed),
            (Decoder, &mut self.marker_embed),
            (Decoder, &mut b.wq),
            (Decoder, &mut b.wk),
            (Decoder, &mut b.wv),
            (Decoder, &mut b.wo),
            (Decoder, &mut b.w1),
            (Decoder, &mut b.b1),
            (Decoder, &mut b.w2),
            (Decoder, &mut b.b2),
            (Decoder, &mut self.decoder.head),
            (Decoder, &mut self.decoder.head_bias),
        ]
    }

    pub fn groups(&self) -> std::collections::BTreeSet<ParamGroup> {
        self.params().into_iter().map(|(g, _, _)| g).collect()
    }

    fn encode_frame(&self, frame: &ImageInput) -> Result<FrameCache> {
        let ((rows, cols), patches) = extract_patches(frame, self.embedder.patch)?;
        let feats = self.embedder.embed(&patches)?.reshape(&[rows, cols, self.embedder.dim()])?;
        let grid = PatchGrid::new(feats)?;
        let pooled = local_global_pool(&grid, &self.scorer)?;
        Ok(FrameCache { patches, grid, pooled })
    }

    /// Builds the fused sequence and the decoder input rows.
    pub fn forward_inputs(&self, sample: &Sample) -> Result<(Vec<TokenItem>, Tensor)> {
        let frames = sample.frames.iter().map(|f| self.encode_frame(f)).collect::<Result<Vec<_>>>()?;
        self.build_inputs(sample, &frames)
    }

    fn build_inputs(&self, sample: &Sample, frames: &[FrameCache]) -> Result<(Vec<TokenItem>, Tensor)> {
        let mut parts = vec![Part::text([sample.prompt])];
        if !frames.is_empty() {
            let pooled: Vec<PatchGrid> = frames.iter().map(|f| f.pooled.clone()).collect();
            parts.push(Part::visual(project_video(&pooled, &self.visual_connector)?));
        }
        if let Some(rows) = &sample.audio {
            parts.push(Part::audio(project_audio(std::slice::from_ref(rows), &self.audio_connector)?));
        }
        parts.push(Part::text([self.cfg.query_token()]));
        let seq = assemble(parts, self.cfg.budget)?;
        let d = self.cfg.llm_dim;
        let mut x = Vec::with_capacity(seq.len() * d);
        for item in &seq.items {
            match item {
                TokenItem::Text(id) => {
                    let id = *id as usize;
                    if id >= self.cfg.vocab {
                        return Err(Error::input(format!("text id {id} outside vocabulary {}", self.cfg.vocab)));
                    }
                    x.extend_from_slice(self.text_embed.row(id));
                }
                TokenItem::Marker(role) => x.extend_from_slice(self.marker_embed.row(role.index())),
                TokenItem::Visual(e) | TokenItem::Audio(e) => x.extend_from_slice(e),
            }
        }
        let len = seq.len();
        Ok((seq.items, Tensor::new(vec![len, d], x)?))
    }

    /// Answer logits at the query position.
    pub fn predict(&self, sample: &Sample) -> Result<Vec<f32>> {
        let (_, x) = self.forward_inputs(sample)?;
        let logits = self.decoder.logits(&x)?;
        Ok(logits.row(x.shape()[0] - 1).to_vec())
    }

    /// Cross-entropy loss of the sample (no gradients).
    pub fn loss(&self, sample: &Sample) -> Result<f64> {
        let (_, x) = self.forward_inputs(sample)?;
        let last = x.shape()[0] - 1;
        let logits = self.decoder.logits(&x)?;
        Ok(crate::train::decoder::cross_entropy(&logits, &[(last, sample.target as usize)])?.0)
    }

    /// Loss and gradients for every parameter of the model.
    pub fn loss_and_grads(&self, sample: &Sample) -> Result<(f64, ModelGrads)> {
        let frames = sample.frames.iter().map(|f| self.encode_frame(f)).collect::<Result<Vec<_>>>()?;
        let (items, x) = self.build_inputs(sample, &frames)?;
        let last = x.shape()[0] - 1;
        let (loss, dg) = self.decoder.loss_and_grads(&x, &[(last, sample.target as usize)])?;

        let d = self.cfg.llm_dim;
        let mut dtext = Tensor::zeros(self.text_embed.shape());
        let mut dmarker = Tensor::zeros(self.marker_embed.shape());
        let mut dvis = Vec::new();
        let mut daud = Vec::new();
        for (pos, item) in items.iter().enumerate() {
            let g = dg.input.row(pos);
            let add = |t: &mut Tensor, row: usize| {
                for (a, b) in t.data_mut()[row * d..(row + 1) * d].iter_mut().zip(g) {
                    *a += b;
                }
            };
            match item {
                TokenItem::Text(id) => add(&mut dtext, *id as usize),
                TokenItem::Marker(role) => add(&mut dmarker, role.index()),
                TokenItem::Visual(_) => dvis.extend_from_slice(g),
                TokenItem::Audio(_) => daud.extend_from_slice(g),
            }
        }

        let mut grads = Vec::with_capacity(24);
        let (emb, scorer, visual) = self.visual_backward(&frames, dvis)?;
        grads.extend(emb);
        grads.extend(scorer);
        grads.extend(visual);
        grads.extend(self.audio_backward(sample.audio.as_ref(), daud)?);
        grads.push(dtext);
        grads.push(dmarker);
        grads.extend(dg.block);
        grads.push(dg.head);
        grads.push(dg.head_bias);
        Ok((loss, ModelGrads(grads)))
    }

    #[allow(clippy::type_complexity)]
    fn visual_backward(
        &self,
        frames: &[FrameCache],
        dvis: Vec<f32>,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>, Vec<Tensor>)> {
        let conn = &self.visual_connector;
        let mut d_emb = vec![Tensor::zeros(self.embedder.weight.shape()), Tensor::zeros(self.embedder.bias.shape())];
        let mut d_scorer = vec![Tensor::zeros(self.scorer.weight1.shape()), Tensor::zeros(self.scorer.bias1.shape())];
        let mut d_conn: Vec<Tensor> =
            [&conn.weight1, &conn.bias1, &conn.weight2, &conn.bias2].iter().map(|t| Tensor::zeros(t.shape())).collect();
        if frames.is_empty() {
            return Ok((d_emb, d_scorer, d_conn));
        }
        let rows: usize = frames.iter().map(|f| f.pooled.tokens()).sum();
        let c = self.embedder.dim();
        let stacked: Vec<f32> = frames.iter().flat_map(|f| f.pooled.features().data().iter().copied()).collect();
        let stacked = Tensor::new(vec![rows, c], stacked)?;
        let dout = Tensor::new(vec![rows, self.cfg.llm_dim], dvis)?;
        let (dpooled, cg) = conn.backward(&stacked, &dout)?;
        for (acc, g) in d_conn.iter_mut().zip([cg.weight1, cg.bias1, cg.weight2, cg.bias2]) {
            acc.add_assign(&g)?;
        }
        let mut offset = 0;
        for f in frames {
            let n = f.pooled.tokens();
            let slice = dpooled.data()[offset * c..(offset + n) * c].to_vec();
            offset += n;
            let dp = Tensor::new(f.pooled.features().shape().to_vec(), slice)?;
            let (dgrid, sg) = local_global_pool_backward(&f.grid, &self.scorer, &dp)?;
            d_scorer[0].add_assign(&sg.weight1)?;
            d_scorer[1].add_assign(&sg.bias1)?;
            let dgrid = dgrid.reshape(&[f.grid.tokens(), c])?;
            d_emb[0].add_assign(&f.patches.transpose()?.matmul(&dgrid)?)?;
            d_emb[1].add_assign(&dgrid.sum_rows()?)?;
        }
        Ok((d_emb, d_scorer, d_conn))
    }

    fn audio_backward(&self, audio: Option<&Tensor>, daud: Vec<f32>) -> Result<Vec<Tensor>> {
        let conn = &self.audio_connector;
        match audio {
            None => Ok([&conn.weight1, &conn.bias1, &conn.weight2, &conn.bias2]
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect()),
            Some(rows) => {
                let dout = Tensor::new(vec![rows.shape()[0], self.cfg.llm_dim], daud)?;
                let (_, g) = conn.backward(rows, &dout)?;
                Ok(vec![g.weight1, g.bias1, g.weight2, g.bias2])
            }
        }
    }
}

struct FrameCache {
    patches: Tensor,
    grid: PatchGrid,
    pooled: PatchGrid,
}
