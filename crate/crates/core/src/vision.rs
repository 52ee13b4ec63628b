//! Native-aspect patchification, the seeded toy patch embedder, and
//! local-global attention pooling.
//!
//! Pooling halves both grid dimensions. For every 2×2 window the window mean
//! (`f_global`) is appended to each of the four local feature vectors, a
//! scorer maps the resulting `2C` vector to `C` logits, and a softmax across
//! the four positions (per channel) weights the local features:
//!
//! ```text
//! z_p   = [f_p, mean(f_window)]          (2C)
//! s_p   = scorer(z_p)                     (C)
//! π_p,c = exp(s_p,c) / Σ_q exp(s_q,c)
//! out_c = Σ_p π_p,c · f_p,c
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{expect_inputs, Differentiable};
use crate::tensor::{bilinear_downsample2x, Activation, Tensor, WINDOW};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionConfig {
    /// Patch side in pixels.
    pub patch: usize,
    /// Channel width of the patch embedder and pooled grid.
    pub dim: usize,
    /// Largest accepted image side in pixels.
    pub max_side: usize,
    pub max_frames: usize,
    pub scorer_activation: Activation,
    pub seed: u64,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self { patch: 16, dim: 16, max_side: 1536, max_frames: 64, scorer_activation: Activation::Gelu, seed: 7 }
    }
}

/// An RGB image with values in `[0, 1]`, stored `H×W×3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput {
    pixels: Tensor,
}

impl ImageInput {
    pub fn new(pixels: Tensor) -> Result<Self> {
        let (_, _, c) = pixels.dims3()?;
        if c != CHANNELS {
            return Err(Error::input(format!("images need 3 channels, got {c}")));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::input("pixel values must lie in [0, 1]"));
        }
        Ok(Self { pixels })
    }

    /// Wraps 8-bit interleaved RGB bytes.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
        Self::new(Tensor::new(vec![height, width, CHANNELS], data)?)
    }

    /// Reads a binary portable pixel map (P6).
    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        if !bytes.starts_with(b"P6") {
            return Err(Error::input(format!("{} is not a binary PPM (P6) file", path.display())));
        }
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
            .map_err(|e| Error::input(format!("cannot decode {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(h as usize, w as usize, img.as_raw())
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<ImageInput>,
}

impl FrameSequence {
    pub fn new(frames: Vec<ImageInput>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::input("a video needs at least one frame"))?;
        let dims = (first.height(), first.width());
        if let Some(i) = frames.iter().position(|f| (f.height(), f.width()) != dims) {
            return Err(Error::input(format!(
                "frame {i} is {}×{}, expected {}×{}",
                frames[i].height(),
                frames[i].width(),
                dims.0,
                dims.1
            )));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[ImageInput] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Patch features laid out `rows × cols × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    features: Tensor,
}

impl PatchGrid {
    pub fn new(features: Tensor) -> Result<Self> {
        features.dims3()?;
        Ok(Self { features })
    }

    pub fn rows(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn tokens(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn into_features(self) -> Tensor {
        self.features
    }

    /// Features as a `(rows·cols) × C` matrix in row-major grid order.
    pub fn to_matrix(&self) -> Tensor {
        Tensor::from_parts(vec![self.tokens(), self.channels()], self.features.data().to_vec())
    }
}

/// Fixed linear map from flattened `patch×patch×3` pixels to `dim` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedder {
    pub patch: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl PatchEmbedder {
    pub fn seeded(patch: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = patch * patch * CHANNELS;
        let weight = Tensor::uniform(&[fan_in, dim], (3.0 / fan_in as f32).sqrt(), &mut rng);
        let bias = Tensor::uniform(&[dim], 0.1, &mut rng);
        Self { patch, weight, bias }
    }

    pub fn dim(&self) -> usize {
        self.bias.numel()
    }

    pub fn embed(&self, patches: &Tensor) -> Result<Tensor> {
        patches.matmul(&self.weight)?.add_row_bias(&self.bias)
    }
}

/// Replicate-pads an image so both sides are multiples of `2·patch`, then
/// flattens each patch (`py, px, channel` order) into one row.
///
/// Returns the `(rows, cols)` patch grid and the `(rows·cols) × patch²·3`
/// patch matrix.
pub fn extract_patches(image: &ImageInput, patch: usize) -> Result<((usize, usize), Tensor)> {
    let (h, w) = (image.height(), image.width());
    if patch == 0 {
        return Err(Error::config("patch size must be positive"));
    }
    if h < patch || w < patch {
        return Err(Error::input(format!("image {h}×{w} is smaller than one {patch}×{patch} patch")));
    }
    let unit = 2 * patch;
    let (ph, pw) = (h.div_ceil(unit) * unit, w.div_ceil(unit) * unit);
    let (rows, cols) = (ph / patch, pw / patch);
    let width = patch * patch * CHANNELS;
    let src = image.pixels.data();
    let mut out = Vec::with_capacity(rows * cols * width);
    for r in 0..rows {
        for c in 0..cols {
            for py in 0..patch {
                let y = (r * patch + py).min(h - 1);
                for px in 0..patch {
                    let x = (c * patch + px).min(w - 1);
                    let base = (y * w + x) * CHANNELS;
                    out.extend_from_slice(&src[base..base + CHANNELS]);
                }
            }
        }
    }
    Ok(((rows, cols), Tensor::from_parts(vec![rows * cols, width], out)))
}

/// Splits an image into an even grid of patches and embeds each one.
/// The aspect ratio is kept; only edge replication is added.
pub fn patchify(image: &ImageInput, embedder: &PatchEmbedder) -> Result<PatchGrid> {
    let ((rows, cols), patches) = extract_patches(image, embedder.patch)?;
    let feats = embedder.embed(&patches)?.reshape(&[rows, cols, embedder.dim()])?;
    PatchGrid::new(feats)
}

/// Scores concatenated local/global features: `2C → C`, optionally followed
/// by a second `C → C` affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolScorer {
    pub weight1: Tensor,
    pub bias1: Tensor,
    pub activation: Activation,
    pub second: Option<(Tensor, Tensor)>,
}

impl PoolScorer {
    pub fn new(weight1: Tensor, bias1: Tensor, activation: Activation) -> Result<Self> {
        let (rows, cols) = weight1.dims2()?;
        if rows != 2 * cols || bias1.numel() != cols {
            return Err(Error::config(format!(
                "scorer weight {:?} / bias {:?} do not map 2C to C",
                weight1.shape(),
                bias1.shape()
            )));
        }
        Ok(Self { weight1, bias1, activation, second: None })
    }

    pub fn with_second_layer(mut self, weight2: Tensor, bias2: Tensor) -> Result<Self> {
        let c = self.channels();
        if weight2.shape() != [c, c] || bias2.numel() != c {
            return Err(Error::config("second scorer layer must be C×C with a length-C bias"));
        }
        self.second = Some((weight2, bias2));
        Ok(self)
    }

    pub fn seeded(channels: usize, activation: Activation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (3.0 / (2 * channels) as f32).sqrt();
        let weight1 = Tensor::uniform(&[2 * channels, channels], scale, &mut rng);
        let bias1 = Tensor::uniform(&[channels], 0.1, &mut rng);
        Self { weight1, bias1, activation, second: None }
    }

    pub fn channels(&self) -> usize {
        self.bias1.numel()
    }

    fn pre_activation(&self, z: &[f32], out: &mut [f32]) {
        let c = self.channels();
        out.copy_from_slice(self.bias1.data());
        let w = self.weight1.data();
        for (i, &zi) in z.iter().enumerate() {
            for (o, &wv) in out.iter_mut().zip(&w[i * c..(i + 1) * c]) {
                *o += zi * wv;
            }
        }
    }

    fn logits(&self, hidden: &[f32], out: &mut [f32]) {
        match &self.second {
            None => out.copy_from_slice(hidden),
            Some((w2, b2)) => {
                let c = self.channels();
                out.copy_from_slice(b2.data());
                for (i, &hv) in hidden.iter().enumerate() {
                    for (o, &wv) in out.iter_mut().zip(&w2.data()[i * c..(i + 1) * c]) {
                        *o += hv * wv;
                    }
                }
            }
        }
    }
}

/// Gradients of the pooling output with respect to the scorer parameters.
#[derive(Debug, Clone)]
pub struct ScorerGrads {
    pub weight1: Tensor,
    pub bias1: Tensor,
    pub second: Option<(Tensor, Tensor)>,
}

struct WindowState {
    /// `[position][channel]` features.
    local: [Vec<f32>; 4],
    concat: [Vec<f32>; 4],
    pre: [Vec<f32>; 4],
    hidden: [Vec<f32>; 4],
    weights: [Vec<f32>; 4],
}

fn window_state(feats: &Tensor, scorer: &PoolScorer, global: &[f32], wi: usize, wj: usize) -> WindowState {
    let (_, w, c) = feats.dims3().expect("grid");
    let src = feats.data();
    let local: [Vec<f32>; 4] = WINDOW.map(|(di, dj)| {
        let base = ((2 * wi + di) * w + 2 * wj + dj) * c;
        src[base..base + c].to_vec()
    });
    let concat = std::array::from_fn(|p| {
        let mut z = local[p].clone();
        z.extend_from_slice(global);
        z
    });
    let mut pre: [Vec<f32>; 4] = std::array::from_fn(|_| vec![0.0; c]);
    let mut hidden: [Vec<f32>; 4] = std::array::from_fn(|_| vec![0.0; c]);
    let mut logits: [Vec<f32>; 4] = std::array::from_fn(|_| vec![0.0; c]);
    for p in 0..4 {
        scorer.pre_activation(&concat[p], &mut pre[p]);
        for (h, &a) in hidden[p].iter_mut().zip(&pre[p]) {
            *h = scorer.activation.apply(a);
        }
        scorer.logits(&hidden[p], &mut logits[p]);
    }
    let mut weights: [Vec<f32>; 4] = std::array::from_fn(|_| vec![0.0; c]);
    for ch in 0..c {
        let max = (0..4).map(|p| logits[p][ch]).fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f64;
        for p in 0..4 {
            let e = (logits[p][ch] - max).exp();
            weights[p][ch] = e;
            total += f64::from(e);
        }
        for weight in weights.iter_mut() {
            weight[ch] = (f64::from(weight[ch]) / total) as f32;
        }
    }
    WindowState { local, concat, pre, hidden, weights }
}

fn check_pool_input(grid: &Tensor, scorer: &PoolScorer) -> Result<(usize, usize, usize)> {
    let (h, w, c) = grid.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::precondition(format!("pooling needs an even grid, got {h}×{w}")));
    }
    if c != scorer.channels() {
        return Err(Error::config(format!("scorer expects {} channels, grid has {c}", scorer.channels())));
    }
    Ok((h, w, c))
}

/// Local-global attention pooling: `h×w×C → (h/2)×(w/2)×C`.
pub fn local_global_pool(grid: &PatchGrid, scorer: &PoolScorer) -> Result<PatchGrid> {
    let feats = grid.features();
    let (h, w, c) = check_pool_input(feats, scorer)?;
    let global = bilinear_downsample2x(feats)?;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            let cell = (i * ow + j) * c;
            let state = window_state(feats, scorer, &global.data()[cell..cell + c], i, j);
            for p in 0..4 {
                for ch in 0..c {
                    out[cell + ch] += state.weights[p][ch] * state.local[p][ch];
                }
            }
        }
    }
    PatchGrid::new(Tensor::from_parts(vec![oh, ow, c], out))
}

/// Softmax weights `π` laid out `(h/2) × (w/2) × 4 × C`, positions in
/// row-major window order.
pub fn pool_weights(grid: &PatchGrid, scorer: &PoolScorer) -> Result<Tensor> {
    let feats = grid.features();
    let (h, w, c) = check_pool_input(feats, scorer)?;
    let global = bilinear_downsample2x(feats)?;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow * 4 * c);
    for i in 0..oh {
        for j in 0..ow {
            let cell = (i * ow + j) * c;
            let state = window_state(feats, scorer, &global.data()[cell..cell + c], i, j);
            for weights in &state.weights {
                out.extend_from_slice(weights);
            }
        }
    }
    Ok(Tensor::from_parts(vec![oh, ow, 4, c], out))
}

/// Backward pass of [`local_global_pool`]: returns the gradient with respect
/// to the input grid and to the scorer parameters.
pub fn local_global_pool_backward(
    grid: &PatchGrid,
    scorer: &PoolScorer,
    grad_output: &Tensor,
) -> Result<(Tensor, ScorerGrads)> {
    let feats = grid.features();
    let (h, w, c) = check_pool_input(feats, scorer)?;
    let (oh, ow) = (h / 2, w / 2);
    if grad_output.shape() != [oh, ow, c] {
        return Err(Error::Dimension {
            op: "local_global_pool_backward",
            left: vec![oh, ow, c],
            right: grad_output.shape().to_vec(),
        });
    }
    let global = bilinear_downsample2x(feats)?;
    let mut dfeat = vec![0.0f32; h * w * c];
    let mut dw1 = vec![0.0f32; 2 * c * c];
    let mut db1 = vec![0.0f32; c];
    let mut second = scorer.second.as_ref().map(|_| (vec![0.0f32; c * c], vec![0.0f32; c]));
    let w1 = scorer.weight1.data();

    for i in 0..oh {
        for j in 0..ow {
            let cell = (i * ow + j) * c;
            let dout = &grad_output.data()[cell..cell + c];
            let st = window_state(feats, scorer, &global.data()[cell..cell + c], i, j);
            let mut dglobal = vec![0.0f32; c];

            // ds[p][ch] via the softmax Jacobian across the four positions.
            let mut dlogits: [Vec<f32>; 4] = std::array::from_fn(|_| vec![0.0; c]);
            for ch in 0..c {
                let dpi: [f32; 4] = std::array::from_fn(|p| dout[ch] * st.local[p][ch]);
                let dot: f32 = (0..4).map(|p| st.weights[p][ch] * dpi[p]).sum();
                for p in 0..4 {
                    dlogits[p][ch] = st.weights[p][ch] * (dpi[p] - dot);
                }
            }

            for p in 0..4 {
                let (di, dj) = WINDOW[p];
                let base = ((2 * i + di) * w + 2 * j + dj) * c;
                for ch in 0..c {
                    dfeat[base + ch] += dout[ch] * st.weights[p][ch];
                }

                let dhidden = match (&scorer.second, second.as_mut()) {
                    (Some((w2, _)), Some((dw2, db2))) => {
                        let mut dh = vec![0.0f32; c];
                        for a in 0..c {
                            for b in 0..c {
                                dw2[a * c + b] += st.hidden[p][a] * dlogits[p][b];
                                dh[a] += w2.data()[a * c + b] * dlogits[p][b];
                            }
                        }
                        for (d, &g) in db2.iter_mut().zip(&dlogits[p]) {
                            *d += g;
                        }
                        dh
                    }
                    _ => dlogits[p].clone(),
                };
                let dpre: Vec<f32> =
                    dhidden.iter().zip(&st.pre[p]).map(|(&g, &a)| g * scorer.activation.derivative(a)).collect();
                for (d, &g) in db1.iter_mut().zip(&dpre) {
                    *d += g;
                }
                for (r, &z) in st.concat[p].iter().enumerate() {
                    let row = &w1[r * c..(r + 1) * c];
                    let mut dz = 0.0f32;
                    for ch in 0..c {
                        dw1[r * c + ch] += z * dpre[ch];
                        dz += row[ch] * dpre[ch];
                    }
                    if r < c {
                        dfeat[base + r] += dz;
                    } else {
                        dglobal[r - c] += dz;
                    }
                }
            }

            for (di, dj) in WINDOW {
                let base = ((2 * i + di) * w + 2 * j + dj) * c;
                for ch in 0..c {
                    dfeat[base + ch] += 0.25 * dglobal[ch];
                }
            }
        }
    }

    let grads = ScorerGrads {
        weight1: Tensor::from_parts(vec![2 * c, c], dw1),
        bias1: Tensor::from_parts(vec![c], db1),
        second: second.map(|(dw2, db2)| (Tensor::from_parts(vec![c, c], dw2), Tensor::from_parts(vec![c], db2))),
    };
    Ok((Tensor::from_parts(vec![h, w, c], dfeat), grads))
}

/// [`local_global_pool`] as a checkable op over `[grid, weight1, bias1]`
/// (plus `[weight2, bias2]` when `two_layer`).
pub struct LocalGlobalPoolOp {
    pub activation: Activation,
    pub two_layer: bool,
}

impl LocalGlobalPoolOp {
    fn unpack(&self, inputs: &[Tensor]) -> Result<(PatchGrid, PoolScorer)> {
        let expected = if self.two_layer { 5 } else { 3 };
        if inputs.len() != expected {
            return Err(Error::precondition(format!("pooling op takes {expected} inputs")));
        }
        let mut scorer = PoolScorer::new(inputs[1].clone(), inputs[2].clone(), self.activation)?;
        if self.two_layer {
            scorer = scorer.with_second_layer(inputs[3].clone(), inputs[4].clone())?;
        }
        Ok((PatchGrid::new(inputs[0].clone())?, scorer))
    }
}

impl Differentiable for LocalGlobalPoolOp {
    fn name(&self) -> &str {
        "local_global_pool"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let (grid, scorer) = self.unpack(inputs)?;
        Ok(local_global_pool(&grid, &scorer)?.into_features())
    }

    fn backward(&self, inputs: &[Tensor], _output: &Tensor, grad_output: &Tensor) -> Result<Vec<Tensor>> {
        let (grid, scorer) = self.unpack(inputs)?;
        let (dgrid, g) = local_global_pool_backward(&grid, &scorer, grad_output)?;
        let mut out = vec![dgrid, g.weight1, g.bias1];
        if let Some((dw2, db2)) = g.second {
            out.push(dw2);
            out.push(db2);
        }
        Ok(out)
    }
}

/// Patch embedding as a checkable op over `[patches, weight, bias]`.
pub struct PatchEmbedOp;

impl Differentiable for PatchEmbedOp {
    fn name(&self) -> &str {
        "patch_embed"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let [x, w, b] = expect_inputs::<3>(self.name(), inputs)?;
        x.matmul(w)?.add_row_bias(b)
    }

    fn backward(&self, inputs: &[Tensor], _output: &Tensor, grad_output: &Tensor) -> Result<Vec<Tensor>> {
        let [x, w, _] = expect_inputs::<3>(self.name(), inputs)?;
        Ok(vec![grad_output.matmul(&w.transpose()?)?, x.transpose()?.matmul(grad_output)?, grad_output.sum_rows()?])
    }
}

/// The vision front-end: seeded embedder plus a shared pooling scorer.
#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub embedder: PatchEmbedder,
    pub scorer: PoolScorer,
    pub max_side: usize,
    pub max_frames: usize,
}

impl VisionEncoder {
    pub fn from_config(cfg: &VisionConfig) -> Self {
        Self {
            embedder: PatchEmbedder::seeded(cfg.patch, cfg.dim, cfg.seed),
            scorer: PoolScorer::seeded(cfg.dim, cfg.scorer_activation, cfg.seed.wrapping_add(1)),
            max_side: cfg.max_side,
            max_frames: cfg.max_frames,
        }
    }

    fn check_size(&self, image: &ImageInput) -> Result<()> {
        if image.height() > self.max_side || image.width() > self.max_side {
            return Err(Error::input(format!(
                "image {}×{} exceeds the {}×{} cap",
                image.height(),
                image.width(),
                self.max_side,
                self.max_side
            )));
        }
        Ok(())
    }

    pub fn patchify(&self, image: &ImageInput) -> Result<PatchGrid> {
        self.check_size(image)?;
        patchify(image, &self.embedder)
    }

    pub fn encode_image(&self, image: &ImageInput) -> Result<PatchGrid> {
        local_global_pool(&self.patchify(image)?, &self.scorer)
    }

    /// Encodes every frame with the same weights, in frame order.
    pub fn encode_frames(&self, video: &FrameSequence) -> Result<Vec<PatchGrid>> {
        if video.len() > self.max_frames {
            return Err(Error::input(format!("video has {} frames, the cap is {}", video.len(), self.max_frames)));
        }
        video.frames().iter().map(|f| self.encode_image(f)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::grad_check;

    fn image(h: usize, w: usize, seed: u64) -> ImageInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::uniform(&[h, w, 3], 0.5, &mut rng).map(|v| v + 0.5);
        ImageInput::new(t).unwrap()
    }

    #[test]
    fn patchify_grid_shapes() {
        let emb = PatchEmbedder::seeded(16, 4, 1);
        assert_eq!(patchify(&image(32, 32, 0), &emb).unwrap().features().shape(), &[2, 2, 4]);
        // 48 rows → 3 patches, padded to an even 4
        let g = patchify(&image(48, 32, 0), &emb).unwrap();
        assert_eq!((g.rows(), g.cols()), (4, 2));
        assert!(patchify(&image(15, 32, 0), &emb).is_err());
    }

    #[test]
    fn padding_replicates_edges() {
        let img = image(20, 17, 3);
        let ((rows, cols), patches) = extract_patches(&img, 4).unwrap();
        assert_eq!((rows, cols), (6, 6));
        // bottom-right patch is entirely the last pixel
        let last = patches.row(rows * cols - 1);
        let px = &img.pixels().data()[(19 * 17 + 16) * 3..(19 * 17 + 17) * 3];
        for chunk in last.chunks(3) {
            assert_eq!(chunk, px);
        }
    }

    #[test]
    fn select_first_channel_example() {
        // C=1, w=[1,0]ᵀ, b=0, identity activation: logits are the features
        let scorer = PoolScorer::new(
            Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap(),
            Tensor::zeros(&[1]),
            Activation::Identity,
        )
        .unwrap();
        let grid = PatchGrid::new(Tensor::new(vec![2, 2, 1], vec![1., 2., 3., 4.]).unwrap()).unwrap();
        let out = local_global_pool(&grid, &scorer).unwrap();
        let z: f64 = (1..=4).map(|v| f64::from(v).exp()).sum();
        let expected: f64 = (1..=4).map(|v| f64::from(v) * f64::from(v).exp() / z).sum();
        assert!((f64::from(out.features().data()[0]) - expected).abs() < 1e-5);
        assert!((expected - 3.4926).abs() < 1e-3);
    }

    #[test]
    fn constant_grid_pools_to_constant() {
        let scorer = PoolScorer::seeded(3, Activation::Gelu, 9);
        let v = [0.3f32, -1.2, 2.0];
        let data: Vec<f32> = (0..4 * 6).flat_map(|_| v).collect();
        let grid = PatchGrid::new(Tensor::new(vec![4, 6, 3], data).unwrap()).unwrap();
        let out = local_global_pool(&grid, &scorer).unwrap();
        assert_eq!((out.rows(), out.cols(), out.tokens()), (2, 3, 6));
        for cell in out.features().data().chunks(3) {
            for (a, b) in cell.iter().zip(v) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn odd_grid_and_channel_mismatch_rejected() {
        let scorer = PoolScorer::seeded(2, Activation::Gelu, 0);
        let odd = PatchGrid::new(Tensor::zeros(&[3, 2, 2])).unwrap();
        assert!(matches!(local_global_pool(&odd, &scorer), Err(Error::Precondition(_))));
        let wide = PatchGrid::new(Tensor::zeros(&[2, 2, 3])).unwrap();
        assert!(matches!(local_global_pool(&wide, &scorer), Err(Error::Config(_))));
    }

    #[test]
    fn pooling_gradients_check() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Tensor::uniform(&[4, 4, 3], 1.0, &mut rng);
            let w1 = Tensor::uniform(&[6, 3], 0.8, &mut rng);
            let b1 = Tensor::uniform(&[3], 0.2, &mut rng);
            let op = LocalGlobalPoolOp { activation: Activation::Gelu, two_layer: false };
            let err = grad_check(&op, &[f.clone(), w1.clone(), b1.clone()], 1e-3).unwrap();
            assert!(err < 1e-3, "seed {seed}: {err}");

            let w2 = Tensor::uniform(&[3, 3], 0.8, &mut rng);
            let b2 = Tensor::uniform(&[3], 0.2, &mut rng);
            let op2 = LocalGlobalPoolOp { activation: Activation::Gelu, two_layer: true };
            let err2 = grad_check(&op2, &[f, w1, b1, w2, b2], 1e-3).unwrap();
            assert!(err2 < 1e-3, "seed {seed} two-layer: {err2}");
        }
    }

    #[test]
    fn frame_cap() {
        let cfg = VisionConfig { dim: 4, ..VisionConfig::default() };
        let enc = VisionEncoder::from_config(&cfg);
        let one = FrameSequence::new(vec![image(32, 32, 1)]).unwrap();
        let grids = enc.encode_frames(&one).unwrap();
        assert_eq!(grids, vec![enc.encode_image(&one.frames()[0]).unwrap()]);

        let frames: Vec<_> = (0..65).map(|i| image(32, 32, i)).collect();
        let err = enc.encode_frames(&FrameSequence::new(frames).unwrap()).unwrap_err();
        assert!(err.to_string().contains("64"));
    }

    #[test]
    fn frames_must_share_dimensions() {
        assert!(FrameSequence::new(vec![image(32, 32, 0), image(32, 48, 0)]).is_err());
        assert!(FrameSequence::new(vec![]).is_err());
    }

    #[test]
    fn oversize_image_rejected() {
        let cfg = VisionConfig { dim: 2, max_side: 64, ..VisionConfig::default() };
        let enc = VisionEncoder::from_config(&cfg);
        assert!(enc.encode_image(&image(80, 32, 0)).is_err());
        assert!(enc.encode_image(&image(64, 32, 0)).is_ok());
    }
}
