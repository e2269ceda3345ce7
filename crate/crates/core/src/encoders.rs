//! Small transformer encoders for image patches and prompt text.
//!
//! Both encoders are trained from scratch. The visual encoder emits one
//! token per patch (no class token) and keeps each block's self-attention
//! weights for rollout. The text encoder mean-pools its token states and
//! projects them to the joint dimension.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{normal, LayerNorm, Linear, MultiHeadAttention};
use crate::optim::{ParamGroup, ParamId, ParamStore};
use crate::tensor::DenseTensor;

/// Prompt used when a text has no tokens.
pub const NEUTRAL_PROMPT: &str = "the attribute is unclear";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

const POS_STD: f64 = 0.5;

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let g = ParamGroup::Backbone;
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width, g),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, g, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width, g),
            fc1: Linear::new(
                store,
                &format!("{name}.fc1"),
                width,
                width * mlp_ratio,
                g,
                rng,
            ),
            fc2: Linear::new(
                store,
                &format!("{name}.fc2"),
                width * mlp_ratio,
                width,
                g,
                rng,
            ),
        })
    }

    /// Returns the block output and its attention weights `[B, heads, L, L]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        bias: Option<Var>,
    ) -> Result<(Var, Var)> {
        let h = self.ln1.forward(g, store, x)?;
        let (a, w) = self.attn.forward(g, store, h, h, bias)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, store, h)?;
        Ok((g.add(x, h)?, w))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.ln1.params();
        p.extend(self.attn.params());
        p.extend(self.ln2.params());
        p.extend(self.fc1.params());
        p.extend(self.fc2.params());
        p
    }
}

/// Number of trailing blocks left trainable in each encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreezePolicy {
    pub visual: usize,
    pub text: usize,
}

fn apply_freeze(
    store: &mut ParamStore,
    all: &[ParamId],
    blocks: &[Block],
    last: usize,
) -> Result<()> {
    if last > blocks.len() {
        return Err(Error::Config(format!(
            "cannot unfreeze {last} blocks of a depth-{} encoder",
            blocks.len()
        )));
    }
    for &id in all {
        store.set_trainable(id, false);
    }
    for b in &blocks[blocks.len() - last..] {
        for id in b.params() {
            store.set_trainable(id, true);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Slope of the distance penalty added to self-attention scores; 0 disables it.
    pub locality_bias: f64,
}

impl VisualConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub config: VisualConfig,
    pub patch: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    bias: Option<DenseTensor>,
}

/// Token grid plus the per-block self-attention weights.
#[derive(Clone, Debug)]
pub struct VisualOutput {
    pub tokens: Var,
    pub attention: Vec<Var>,
}

/// Additive score bias `-slope_h * distance(i, j)` on a `grid x grid` layout,
/// with the slope halved for each successive head.
pub fn locality_bias(grid: usize, heads: usize, slope: f64) -> DenseTensor {
    let n = grid * grid;
    let mut data = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        let s = slope / (1u64 << h) as f64;
        for i in 0..n {
            for j in 0..n {
                let dy = (i / grid) as f64 - (j / grid) as f64;
                let dx = (i % grid) as f64 - (j % grid) as f64;
                data.push(-s * (dx * dx + dy * dy).sqrt());
            }
        }
    }
    DenseTensor::new([heads, n, n], data).expect("shape matches")
}

impl VisualEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: VisualConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.patch_size == 0 || config.image_size % config.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch size {}",
                config.image_size, config.patch_size
            )));
        }
        let grid = config.grid();
        let n = grid * grid;
        let pdim = 3 * config.patch_size * config.patch_size;
        let patch = Linear::new(
            store,
            &format!("{name}.patch"),
            pdim,
            config.width,
            ParamGroup::Backbone,
            rng,
        );
        let pos = store.add(
            format!("{name}.pos"),
            normal(&[n, config.width], POS_STD, rng),
            ParamGroup::Backbone,
        );
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            blocks.push(Block::new(
                store,
                &format!("{name}.block{i}"),
                config.width,
                config.heads,
                config.mlp_ratio,
                rng,
            )?);
        }
        let bias = (config.locality_bias > 0.0)
            .then(|| locality_bias(grid, config.heads, config.locality_bias));
        Ok(Self {
            config,
            patch,
            pos,
            blocks,
            bias,
        })
    }

    pub fn grid(&self) -> usize {
        self.config.grid()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.patch.params();
        p.push(self.pos);
        for b in &self.blocks {
            p.extend(b.params());
        }
        p
    }

    pub fn apply_freeze(&self, store: &mut ParamStore, last: usize) -> Result<()> {
        apply_freeze(store, &self.params(), &self.blocks, last)
    }

    /// `images [B, 3, H, W]` to tokens `[B, g*g, width]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, images: Var) -> Result<VisualOutput> {
        let s = g.shape(images).to_vec();
        let size = self.config.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(Error::shape(
                "encode_image",
                &s,
                &[s.first().copied().unwrap_or(1), 3, size, size],
            ));
        }
        let (b, p, gr) = (s[0], self.config.patch_size, self.grid());
        let x = g.reshape(images, &[b, 3, gr, p, gr, p])?;
        let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
        let x = g.reshape(x, &[b, gr * gr, 3 * p * p])?;
        let x = self.patch.forward(g, store, x)?;
        let pos = g.param(store, self.pos);
        let mut x = g.add(x, pos)?;
        let bias = self.bias.as_ref().map(|t| g.constant(t));
        let mut attention = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, w) = blk.forward(g, store, x, bias)?;
            x = y;
            attention.push(w);
        }
        Ok(VisualOutput {
            tokens: x,
            attention,
        })
    }
}

/// Bilinear resampling (corner-aligned) of a `g0 x g0` positional grid to `g1 x g1`.
pub fn interpolate_positional(pe: &DenseTensor, g1: usize) -> Result<DenseTensor> {
    let s = pe.shape();
    let g0 = (s[0] as f64).sqrt().round() as usize;
    if s.len() != 2 || g0 * g0 != s[0] || g1 == 0 {
        return Err(Error::Dimension(format!(
            "positional grid {s:?} cannot be resampled to {g1}"
        )));
    }
    let d = s[1];
    let coord = |i: usize| -> f64 {
        if g1 == 1 {
            (g0 - 1) as f64 / 2.0
        } else {
            i as f64 * (g0 - 1) as f64 / (g1 - 1) as f64
        }
    };
    let src = pe.data();
    let mut out = Vec::with_capacity(g1 * g1 * d);
    for y in 0..g1 {
        let fy = coord(y);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(g0 - 1);
        let wy = fy - y0 as f64;
        for x in 0..g1 {
            let fx = coord(x);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(g0 - 1);
            let wx = fx - x0 as f64;
            for c in 0..d {
                let v = |yy: usize, xx: usize| src[(yy * g0 + xx) * d + c];
                out.push(
                    (1.0 - wy) * ((1.0 - wx) * v(y0, x0) + wx * v(y0, x1))
                        + wy * ((1.0 - wx) * v(y1, x0) + wx * v(y1, x1)),
                );
            }
        }
    }
    DenseTensor::new([g1 * g1, d], out)
}

/// Lowercased word tokenizer with reserved PAD and UNK ids.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Vocabulary {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

impl Vocabulary {
    /// Vocabulary over every word in `texts` plus the neutral prompt.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for t in texts.into_iter().chain([NEUTRAL_PROMPT]) {
            set.extend(split_words(t));
        }
        Self::from_words(set.into_iter().collect())
    }

    /// Rebuilds a vocabulary from its ordered word list (ids start at 2).
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i + 2))
            .collect();
        Self { words, index }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Size including PAD and UNK.
    pub fn len(&self) -> usize {
        self.words.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Token ids; an empty text is replaced by the neutral prompt.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut words = split_words(text);
        if words.is_empty() {
            words = split_words(NEUTRAL_PROMPT);
        }
        words
            .iter()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK_ID))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
    pub out_dim: usize,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextConfig,
    pub vocab: Vocabulary,
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln: LayerNorm,
    pub proj: Linear,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: TextConfig,
        vocab: Vocabulary,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let g = ParamGroup::Backbone;
        let embed = store.add(
            format!("{name}.embed"),
            normal(&[vocab.len(), config.width], 1.0, rng),
            g,
        );
        let pos = store.add(
            format!("{name}.pos"),
            normal(&[config.max_len, config.width], POS_STD, rng),
            g,
        );
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            blocks.push(Block::new(
                store,
                &format!("{name}.block{i}"),
                config.width,
                config.heads,
                config.mlp_ratio,
                rng,
            )?);
        }
        let ln = LayerNorm::new(store, &format!("{name}.ln"), config.width, g);
        let proj = Linear::new(
            store,
            &format!("{name}.proj"),
            config.width,
            config.out_dim,
            g,
            rng,
        );
        Ok(Self {
            config,
            vocab,
            embed,
            pos,
            blocks,
            ln,
            proj,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.embed, self.pos];
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.ln.params());
        p.extend(self.proj.params());
        p
    }

    pub fn apply_freeze(&self, store: &mut ParamStore, last: usize) -> Result<()> {
        apply_freeze(store, &self.params(), &self.blocks, last)
    }

    /// One prompt to a `[1, out_dim]` embedding.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, text: &str) -> Result<Var> {
        let mut ids = self.vocab.encode(text);
        ids.truncate(self.config.max_len);
        let l = ids.len();
        let table = g.param(store, self.embed);
        let x = g.gather_rows(table, &ids)?;
        let pos = g.param(store, self.pos);
        let pos = g.narrow(pos, 0, 0, l)?;
        let x = g.add(x, pos)?;
        let mut x = g.reshape(x, &[1, l, self.config.width])?;
        for blk in &self.blocks {
            x = blk.forward(g, store, x, None)?.0;
        }
        let x = self.ln.forward(g, store, x)?;
        let x = g.mean(x, 1)?;
        self.proj.forward(g, store, x)
    }

    /// Several prompts stacked to `[n, out_dim]`.
    pub fn encode_many(&self, g: &mut Graph, store: &ParamStore, texts: &[String]) -> Result<Var> {
        let parts = texts
            .iter()
            .map(|t| self.encode(g, store, t))
            .collect::<Result<Vec<_>>>()?;
        g.concat(&parts, 0)
    }

    /// Standalone embedding of one prompt.
    pub fn encode_text(&self, store: &ParamStore, text: &str) -> Result<DenseTensor> {
        let mut g = Graph::new();
        let v = self.encode(&mut g, store, text)?;
        Ok(g.tensor(v))
    }
}
