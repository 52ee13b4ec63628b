//! Modality connectors and omni-modal token sequence assembly.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grad::{expect_inputs, Differentiable};
use crate::tensor::{Activation, Tensor};
use crate::vision::PatchGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Decoder embedding width every connector projects into.
    pub llm_dim: usize,
    pub connector_hidden: usize,
    /// Maximum assembled sequence length.
    pub budget: usize,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { llm_dim: 32, connector_hidden: 64, budget: 16_384, seed: 23 }
    }
}

/// Two affine layers with a GELU between them: `in → hidden → out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Connector {
    pub weight1: Tensor,
    pub bias1: Tensor,
    pub weight2: Tensor,
    pub bias2: Tensor,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct ConnectorGrads {
    pub weight1: Tensor,
    pub bias1: Tensor,
    pub weight2: Tensor,
    pub bias2: Tensor,
}

impl Connector {
    pub fn new(weight1: Tensor, bias1: Tensor, weight2: Tensor, bias2: Tensor) -> Result<Self> {
        let (_, hidden) = weight1.dims2()?;
        let (hidden2, out) = weight2.dims2()?;
        if hidden != hidden2 || bias1.numel() != hidden || bias2.numel() != out {
            return Err(Error::config(format!(
                "connector layers do not chain: {:?}+{:?} then {:?}+{:?}",
                weight1.shape(),
                bias1.shape(),
                weight2.shape(),
                bias2.shape()
            )));
        }
        Ok(Self { weight1, bias1, weight2, bias2, activation: Activation::Gelu })
    }

    pub fn seeded(input: usize, hidden: usize, output: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s1 = (3.0 / input as f32).sqrt();
        let s2 = (3.0 / hidden as f32).sqrt();
        Self {
            weight1: Tensor::uniform(&[input, hidden], s1, &mut rng),
            bias1: Tensor::zeros(&[hidden]),
            weight2: Tensor::uniform(&[hidden, output], s2, &mut rng),
            bias2: Tensor::zeros(&[output]),
            activation: Activation::Gelu,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight1.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.bias2.numel()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, d) = x.dims2()?;
        if d != self.input_dim() {
            return Err(Error::config(format!("connector expects {}-dim features, got {d}", self.input_dim())));
        }
        Ok(())
    }

    /// `[n × in] → [n × out]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let act = self.activation;
        let pre = x.matmul(&self.weight1)?.add_row_bias(&self.bias1)?;
        pre.map(|v| act.apply(v)).matmul(&self.weight2)?.add_row_bias(&self.bias2)
    }

    pub fn backward(&self, x: &Tensor, grad_output: &Tensor) -> Result<(Tensor, ConnectorGrads)> {
        self.check_input(x)?;
        let act = self.activation;
        let pre = x.matmul(&self.weight1)?.add_row_bias(&self.bias1)?;
        let hidden = pre.map(|v| act.apply(v));
        let dhidden = grad_output.matmul(&self.weight2.transpose()?)?;
        let dpre = dhidden.zip_map(&pre, |g, a| g * act.derivative(a))?;
        let grads = ConnectorGrads {
            weight1: x.transpose()?.matmul(&dpre)?,
            bias1: dpre.sum_rows()?,
            weight2: hidden.transpose()?.matmul(grad_output)?,
            bias2: grad_output.sum_rows()?,
        };
        Ok((dpre.matmul(&self.weight1.transpose()?)?, grads))
    }
}

/// [`Connector`] as a checkable op over `[x, w1, b1, w2, b2]`.
pub struct ConnectorOp;

impl Differentiable for ConnectorOp {
    fn name(&self) -> &str {
        "connector"
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let [x, w1, b1, w2, b2] = expect_inputs::<5>(self.name(), inputs)?;
        Connector::new(w1.clone(), b1.clone(), w2.clone(), b2.clone())?.forward(x)
    }

    fn backward(&self, inputs: &[Tensor], _output: &Tensor, grad_output: &Tensor) -> Result<Vec<Tensor>> {
        let [x, w1, b1, w2, b2] = expect_inputs::<5>(self.name(), inputs)?;
        let conn = Connector::new(w1.clone(), b1.clone(), w2.clone(), b2.clone())?;
        let (dx, g) = conn.backward(x, grad_output)?;
        Ok(vec![dx, g.weight1, g.bias1, g.weight2, g.bias2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarkerRole {
    VisualStart,
    VisualSep,
    VisualNewline,
    VisualEnd,
    AudioStart,
    AudioSep,
    AudioNewline,
    AudioEnd,
}

impl MarkerRole {
    pub const ALL: [MarkerRole; 8] = [
        MarkerRole::VisualStart,
        MarkerRole::VisualSep,
        MarkerRole::VisualNewline,
        MarkerRole::VisualEnd,
        MarkerRole::AudioStart,
        MarkerRole::AudioSep,
        MarkerRole::AudioNewline,
        MarkerRole::AudioEnd,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&r| r == self).expect("listed")
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MarkerRole::VisualStart => "visual-start",
            MarkerRole::VisualSep => "visual-sep",
            MarkerRole::VisualNewline => "visual-newline",
            MarkerRole::VisualEnd => "visual-end",
            MarkerRole::AudioStart => "audio-start",
            MarkerRole::AudioSep => "audio-sep",
            MarkerRole::AudioNewline => "audio-newline",
            MarkerRole::AudioEnd => "audio-end",
        }
    }

    pub fn modality(self) -> Modality {
        if self.index() < 4 {
            Modality::Visual
        } else {
            Modality::Audio
        }
    }
}

impl fmt::Display for MarkerRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Text,
    Visual,
    Audio,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TokenItem {
    /// Opaque text token id.
    Text(u32),
    Visual(Vec<f32>),
    Audio(Vec<f32>),
    Marker(MarkerRole),
}

impl TokenItem {
    pub fn kind(&self) -> &'static str {
        match self {
            TokenItem::Text(_) => "text",
            TokenItem::Visual(_) => "visual",
            TokenItem::Audio(_) => "audio",
            TokenItem::Marker(_) => "marker",
        }
    }

    pub fn embedding(&self) -> Option<&[f32]> {
        match self {
            TokenItem::Visual(v) | TokenItem::Audio(v) => Some(v),
            _ => None,
        }
    }

    /// One line of the debug format: `kind<TAB>role-or-id<TAB>checksum`.
    pub fn debug_line(&self) -> String {
        match self {
            TokenItem::Text(id) => format!("text\t{id}\t-"),
            TokenItem::Marker(role) => format!("marker\t{role}\t-"),
            TokenItem::Visual(v) | TokenItem::Audio(v) => format!("{}\t-\t{}", self.kind(), embedding_checksum(v)),
        }
    }
}

/// First 16 hex digits of the SHA-256 of the embedding's little-endian bytes.
pub fn embedding_checksum(values: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn rows_of(t: &Tensor) -> impl Iterator<Item = Vec<f32>> + '_ {
    let cols = *t.shape().last().expect("rank >= 1");
    t.data().chunks(cols).map(<[f32]>::to_vec)
}

/// Projects a pooled grid, walking rows in order: one newline marker closes
/// each row and the grid is bracketed by start/end markers, so the item count
/// is `h·w + h + 2`.
pub fn project_visual(grid: &PatchGrid, conn: &Connector) -> Result<Vec<TokenItem>> {
    let mut items = vec![TokenItem::Marker(MarkerRole::VisualStart)];
    push_grid(&mut items, grid, conn)?;
    items.push(TokenItem::Marker(MarkerRole::VisualEnd));
    Ok(items)
}

fn push_grid(items: &mut Vec<TokenItem>, grid: &PatchGrid, conn: &Connector) -> Result<()> {
    let embedded = conn.forward(&grid.to_matrix())?;
    let mut rows = rows_of(&embedded);
    for _ in 0..grid.rows() {
        for _ in 0..grid.cols() {
            items.push(TokenItem::Visual(rows.next().expect("h·w rows")));
        }
        items.push(TokenItem::Marker(MarkerRole::VisualNewline));
    }
    Ok(())
}

/// Projects video frames into a single visual segment, frames separated by
/// visual-sep markers.
pub fn project_video(grids: &[PatchGrid], conn: &Connector) -> Result<Vec<TokenItem>> {
    if grids.is_empty() {
        return Ok(Vec::new());
    }
    let mut items = vec![TokenItem::Marker(MarkerRole::VisualStart)];
    for (i, grid) in grids.iter().enumerate() {
        if i > 0 {
            items.push(TokenItem::Marker(MarkerRole::VisualSep));
        }
        push_grid(&mut items, grid, conn)?;
    }
    items.push(TokenItem::Marker(MarkerRole::VisualEnd));
    Ok(items)
}

/// Projects per-chunk audio token matrices: chunks are joined by audio-sep
/// markers and the whole stream is bracketed, giving `Σ tokens + (n−1) + 2`
/// items. No chunks gives no items.
pub fn project_audio(chunks: &[Tensor], conn: &Connector) -> Result<Vec<TokenItem>> {
    if chunks.is_empty() {
        return Ok(Vec::new());
    }
    let mut items = vec![TokenItem::Marker(MarkerRole::AudioStart)];
    for (i, chunk) in chunks.iter().enumerate() {
        if i > 0 {
            items.push(TokenItem::Marker(MarkerRole::AudioSep));
        }
        items.extend(rows_of(&conn.forward(chunk)?).map(TokenItem::Audio));
    }
    items.push(TokenItem::Marker(MarkerRole::AudioEnd));
    Ok(items)
}

/// One caller-ordered piece of a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Part {
    pub modality: Modality,
    pub items: Vec<TokenItem>,
}

impl Part {
    pub fn text(ids: impl IntoIterator<Item = u32>) -> Self {
        Self { modality: Modality::Text, items: ids.into_iter().map(TokenItem::Text).collect() }
    }

    pub fn visual(items: Vec<TokenItem>) -> Self {
        Self { modality: Modality::Visual, items }
    }

    pub fn audio(items: Vec<TokenItem>) -> Self {
        Self { modality: Modality::Audio, items }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ModalityCounts {
    pub text: usize,
    pub visual: usize,
    pub audio: usize,
}

impl ModalityCounts {
    pub fn total(&self) -> usize {
        self.text + self.visual + self.audio
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub items: Vec<TokenItem>,
    pub budget: usize,
    pub counts: ModalityCounts,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Line-oriented debug dump, one item per line.
    pub fn debug_format(&self) -> String {
        self.items.iter().map(|i| i.debug_line() + "\n").collect()
    }
}

/// Concatenates parts in caller order under a length budget.
pub fn assemble(parts: Vec<Part>, budget: usize) -> Result<TokenSequence> {
    let mut counts = ModalityCounts::default();
    for part in &parts {
        let slot = match part.modality {
            Modality::Text => &mut counts.text,
            Modality::Visual => &mut counts.visual,
            Modality::Audio => &mut counts.audio,
        };
        *slot += part.items.len();
    }
    let required = counts.total();
    if required > budget {
        return Err(Error::Budget { required, available: budget });
    }
    let items: Vec<TokenItem> = parts.into_iter().flat_map(|p| p.items).collect();
    validate(&items, None)?;
    Ok(TokenSequence { items, budget, counts })
}

/// Checks that a sequence reads as
/// `(text | V-start visual-body V-end | A-start audio-body A-end)*`, and
/// optionally that every embedding has width `dim`.
pub fn validate(items: &[TokenItem], dim: Option<usize>) -> Result<()> {
    let mut open: Option<(Modality, usize)> = None;
    for (pos, item) in items.iter().enumerate() {
        let bad = |why: &str| Err(Error::input(format!("malformed sequence at item {pos}: {why}")));
        if let (Some(d), Some(e)) = (dim, item.embedding()) {
            if e.len() != d {
                return bad(&format!("embedding width {} != {d}", e.len()));
            }
        }
        match (open, item) {
            (None, TokenItem::Text(_)) => {}
            (None, TokenItem::Marker(MarkerRole::VisualStart)) => open = Some((Modality::Visual, pos)),
            (None, TokenItem::Marker(MarkerRole::AudioStart)) => open = Some((Modality::Audio, pos)),
            (None, other) => return bad(&format!("{} outside any segment", other.debug_line())),
            (Some((Modality::Visual, _)), TokenItem::Visual(_)) => {}
            (Some((Modality::Audio, _)), TokenItem::Audio(_)) => {}
            (Some((Modality::Visual, start)), TokenItem::Marker(MarkerRole::VisualEnd)) => {
                if pos == start + 1 {
                    return bad("empty visual segment");
                }
                open = None;
            }
            (Some((Modality::Audio, start)), TokenItem::Marker(MarkerRole::AudioEnd)) => {
                if pos == start + 1 {
                    return bad("empty audio segment");
                }
                open = None;
            }
            (Some((Modality::Visual, _)), TokenItem::Marker(MarkerRole::VisualSep | MarkerRole::VisualNewline)) => {}
            (Some((Modality::Audio, _)), TokenItem::Marker(MarkerRole::AudioSep | MarkerRole::AudioNewline)) => {}
            (Some((m, _)), other) => return bad(&format!("{} inside a {m:?} segment", other.debug_line())),
        }
    }
    match open {
        Some((m, start)) => Err(Error::input(format!("{m:?} segment opened at item {start} is never closed"))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::grad_check;

    fn grid(h: usize, w: usize, c: usize) -> PatchGrid {
        let data = (0..h * w * c).map(|v| (v as f32 * 0.37).sin()).collect();
        PatchGrid::new(Tensor::new(vec![h, w, c], data).unwrap()).unwrap()
    }

    #[test]
    fn visual_counts() {
        let conn = Connector::seeded(4, 8, 6, 1);
        assert_eq!(project_visual(&grid(2, 3, 4), &conn).unwrap().len(), 10);
        assert_eq!(project_visual(&grid(1, 1, 4), &conn).unwrap().len(), 4);
        assert!(matches!(project_visual(&grid(1, 1, 5), &conn), Err(Error::Config(_))));
    }

    #[test]
    fn audio_counts() {
        let conn = Connector::seeded(3, 8, 6, 1);
        let chunk = Tensor::full(&[150, 3], 0.1);
        assert_eq!(project_audio(std::slice::from_ref(&chunk), &conn).unwrap().len(), 152);
        let two = project_audio(&[chunk.clone(), chunk], &conn).unwrap();
        assert_eq!(two.len(), 303);
        assert_eq!(two[151], TokenItem::Marker(MarkerRole::AudioSep));
        assert!(project_audio(&[], &conn).unwrap().is_empty());
    }

    #[test]
    fn text_only_has_no_markers() {
        let seq = assemble(vec![Part::text([1, 2, 3])], 16).unwrap();
        assert!(seq.items.iter().all(|i| !matches!(i, TokenItem::Marker(_))));
        assert_eq!(seq.counts, ModalityCounts { text: 3, visual: 0, audio: 0 });
    }

    #[test]
    fn budget_overflow_reports_both_numbers() {
        let err = assemble(vec![Part::text(0..16_385)], 16_384).unwrap_err();
        assert!(matches!(err, Error::Budget { required: 16_385, available: 16_384 }));
        assert!(assemble(vec![Part::text(0..16_384)], 16_384).is_ok());
    }

    #[test]
    fn validator_rejects_misnesting() {
        use MarkerRole::*;
        let m = TokenItem::Marker;
        let v = || TokenItem::Visual(vec![0.0]);
        let a = || TokenItem::Audio(vec![0.0]);
        assert!(validate(&[m(VisualStart), v(), m(VisualEnd)], None).is_ok());
        assert!(validate(&[m(VisualStart), v()], None).is_err());
        assert!(validate(&[m(VisualStart), a(), m(VisualEnd)], None).is_err());
        assert!(validate(&[m(VisualStart), m(AudioStart), a(), m(AudioEnd), m(VisualEnd)], None).is_err());
        assert!(validate(&[m(VisualStart), m(VisualEnd)], None).is_err());
        assert!(validate(&[m(AudioSep)], None).is_err());
        assert!(validate(&[m(VisualStart), TokenItem::Text(1), v(), m(VisualEnd)], None).is_err());
        assert!(validate(&[m(AudioStart), a(), m(AudioEnd)], Some(2)).is_err());
    }

    #[test]
    fn debug_format_lines() {
        let conn = Connector::seeded(2, 4, 3, 0);
        let parts = vec![Part::text([7]), Part::visual(project_visual(&grid(1, 1, 2), &conn).unwrap())];
        let seq = assemble(parts, 100).unwrap();
        let text = seq.debug_format();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "text\t7\t-");
        assert_eq!(lines[1], "marker\tvisual-start\t-");
        assert!(lines[2].starts_with("visual\t-\t") && lines[2].len() == "visual\t-\t".len() + 16);
        assert_eq!(lines[3], "marker\tvisual-newline\t-");
        assert_eq!(lines[4], "marker\tvisual-end\t-");
    }

    #[test]
    fn connector_gradients_check() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::uniform(&[3, 4], 1.0, &mut rng);
            let conn = Connector::seeded(4, 5, 3, seed + 100);
            let b1 = Tensor::uniform(&[5], 0.2, &mut rng);
            let b2 = Tensor::uniform(&[3], 0.2, &mut rng);
            let inputs = [x, conn.weight1, b1, conn.weight2, b2];
            let err = grad_check(&ConnectorOp, &inputs, 1e-3).unwrap();
            assert!(err < 1e-3, "seed {seed}: {err}");
        }
    }
}
