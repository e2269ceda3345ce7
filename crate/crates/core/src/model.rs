//! The dual-path classifier.
//!
//! Path 1 pools the (optionally SCA-refined) projected tokens of its own
//! visual encoder and classifies gender directly. Path 2 queries the tokens
//! of a second visual encoder with one text embedding per attribute,
//! classifies each attribute from its attended token, and classifies gender
//! from their mean. The two path embeddings are fused by self-attention over
//! a two-token sequence.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::encoders::{
    FreezePolicy, TextConfig, TextEncoder, VisualConfig, VisualEncoder, Vocabulary,
};
use crate::error::{Error, Result};
use crate::nn::{normal, LayerNorm, Linear, MlpHead, MultiHeadAttention};
use crate::optim::{ParamGroup, ParamId, ParamStore};
use crate::rng::stream;
use crate::tensor::DenseTensor;

/// Male = 0, Female = 1, Unknown = 2.
pub const GENDER_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeSpec {
    pub name: String,
    pub classes: usize,
    /// Text used as this attribute's query in attribute mode.
    pub query: String,
}

/// Source of the text queries of the attribute path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryMode {
    /// One class-description query per attribute, shared by the batch.
    Attribute,
    /// The sample's own composed prompt, shared by all attributes.
    Sample,
}

impl QueryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            QueryMode::Attribute => "attribute",
            QueryMode::Sample => "sample",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "attribute" => Some(QueryMode::Attribute),
            "sample" => Some(QueryMode::Sample),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub visual_width: usize,
    pub visual_depth: usize,
    pub visual_heads: usize,
    pub mlp_ratio: usize,
    pub locality_bias: f64,
    pub text_width: usize,
    pub text_depth: usize,
    pub text_heads: usize,
    pub text_max_len: usize,
    pub joint_dim: usize,
    pub attributes: Vec<AttributeSpec>,
    pub use_sca_path1: bool,
    pub use_sca_path2: bool,
    pub sca_reduction: usize,
    pub fusion_heads: usize,
    pub attribute_heads: usize,
    pub dropout: f64,
    pub query_mode: QueryMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            visual_width: 32,
            visual_depth: 4,
            visual_heads: 4,
            mlp_ratio: 2,
            locality_bias: 0.0,
            text_width: 32,
            text_depth: 4,
            text_heads: 4,
            text_max_len: 48,
            joint_dim: 16,
            attributes: Vec::new(),
            use_sca_path1: true,
            use_sca_path2: true,
            sca_reduction: 4,
            fusion_heads: 4,
            attribute_heads: 4,
            dropout: 0.1,
            query_mode: QueryMode::Attribute,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size.max(1)
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn visual(&self) -> VisualConfig {
        VisualConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            width: self.visual_width,
            depth: self.visual_depth,
            heads: self.visual_heads,
            mlp_ratio: self.mlp_ratio,
            locality_bias: self.locality_bias,
        }
    }

    pub fn text(&self) -> TextConfig {
        TextConfig {
            width: self.text_width,
            depth: self.text_depth,
            heads: self.text_heads,
            mlp_ratio: self.mlp_ratio,
            max_len: self.text_max_len,
            out_dim: self.joint_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.attributes.is_empty() {
            return err("at least one attribute is required".into());
        }
        if let Some(a) = self.attributes.iter().find(|a| a.classes < 2) {
            return err(format!("attribute {} needs at least 2 classes", a.name));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 || self.image_size == 0 {
            return err(format!(
                "image size {} is not a positive multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        for (name, dim, heads) in [
            ("visual", self.visual_width, self.visual_heads),
            ("text", self.text_width, self.text_heads),
            ("fusion", self.joint_dim, self.fusion_heads),
            ("attribute attention", self.joint_dim, self.attribute_heads),
        ] {
            if heads == 0 || dim % heads != 0 {
                return err(format!(
                    "{name} width {dim} is not divisible by {heads} heads"
                ));
            }
        }
        if self.sca_reduction == 0 || self.joint_dim % self.sca_reduction != 0 {
            return err(format!(
                "joint dimension {} is not divisible by SCA reduction {}",
                self.joint_dim, self.sca_reduction
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.joint_dim < 2
            || self.visual_depth == 0
            || self.mlp_ratio == 0
            || self.text_max_len == 0
        {
            return err("model dimensions must be positive".into());
        }
        Ok(())
    }
}

/// Fixed gate values replacing the learned SCA gates.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GateOverride {
    pub channel: Option<f64>,
    pub spatial: Option<f64>,
}

/// Squeeze-excitation channel gate followed by a 7x7 spatial gate, with a
/// residual connection.
#[derive(Clone, Debug)]
pub struct Sca {
    pub squeeze: Linear,
    pub excite: Linear,
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
}

impl Sca {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        reduction: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if reduction == 0 || dim % reduction != 0 {
            return Err(Error::Config(format!(
                "SCA width {dim} is not divisible by reduction {reduction}"
            )));
        }
        let g = ParamGroup::NewModule;
        Ok(Self {
            squeeze: Linear::new(
                store,
                &format!("{name}.squeeze"),
                dim,
                dim / reduction,
                g,
                rng,
            ),
            excite: Linear::new(
                store,
                &format!("{name}.excite"),
                dim / reduction,
                dim,
                g,
                rng,
            ),
            conv_weight: store.add(
                format!("{name}.conv.weight"),
                normal(&[1, 2, 7, 7], (1.0f64 / 98.0).sqrt(), rng),
                g,
            ),
            conv_bias: store.add(format!("{name}.conv.bias"), DenseTensor::zeros([1]), g),
        })
    }

    /// `F [B, d, g, g] -> (F * A_c) * A_s + F`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f: Var,
        gates: GateOverride,
    ) -> Result<Var> {
        let s = g.shape(f).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("sca", &s, &[0, 0, 0, 0]));
        }
        let (b, d) = (s[0], s[1]);
        let refined = match gates.channel {
            Some(c) => g.scale(f, c)?,
            None => {
                let pooled = g.mean(f, 3)?;
                let pooled = g.mean(pooled, 2)?;
                let h = self.squeeze.forward(g, store, pooled)?;
                let h = g.relu(h)?;
                let h = self.excite.forward(g, store, h)?;
                let a = g.sigmoid(h)?;
                let a = g.reshape(a, &[b, d, 1, 1])?;
                g.mul(f, a)?
            }
        };
        let gated = match gates.spatial {
            Some(v) => g.scale(refined, v)?,
            None => {
                let mx = g.max(refined, 1)?;
                let mx = g.reshape(mx, &[b, 1, s[2], s[3]])?;
                let mean = g.mean(refined, 1)?;
                let mean = g.reshape(mean, &[b, 1, s[2], s[3]])?;
                let stacked = g.concat(&[mx, mean], 1)?;
                let w = g.param(store, self.conv_weight);
                let cb = g.param(store, self.conv_bias);
                let conv = g.conv2d(stacked, w, cb, 3)?;
                let a = g.sigmoid(conv)?;
                g.mul(refined, a)?
            }
        };
        g.add(gated, f)
    }
}

/// Variables of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    /// Direct-path gender logits `[B, 3]`.
    pub gender_direct: Var,
    /// Attribute-mediated gender logits `[B, 3]`.
    pub gender_mediated: Var,
    /// Fused gender logits `[B, 3]`.
    pub gender_fused: Var,
    /// Per-attribute logits `[B, K_a]`, in configured order.
    pub attributes: Vec<Var>,
    /// Text-to-vision weights `[B, heads, A, N]` (A = 1 in sample mode).
    pub attribute_attention: Var,
    /// Fusion self-attention `[B, heads, 2, 2]`.
    pub fusion_attention: Var,
    /// Self-attention of the direct-path encoder, one `[B, heads, N, N]` per block.
    pub visual_attention_direct: Vec<Var>,
    /// Self-attention of the attribute-path encoder.
    pub visual_attention_mediated: Vec<Var>,
    pub v1: Var,
    pub v2: Var,
    pub vf: Var,
}

impl ForwardOutputs {
    /// Cross-attention of attribute `a` as `[B, heads, 1, N]`.
    pub fn attribute_weights(&self, g: &Graph, a: usize) -> Result<DenseTensor> {
        let t = g.tensor(self.attribute_attention);
        let s = t.shape().to_vec();
        let a = if s[2] == 1 { 0 } else { a };
        let mut out = Vec::with_capacity(s[0] * s[1] * s[3]);
        for b in 0..s[0] {
            for h in 0..s[1] {
                let base = ((b * s[1] + h) * s[2] + a) * s[3];
                out.extend_from_slice(&t.data()[base..base + s[3]]);
            }
        }
        DenseTensor::new([s[0], s[1], 1, s[3]], out)
    }
}

/// Options of a forward pass.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Enables dropout with this random stream.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
    pub gate_override: GateOverride,
}

#[derive(Clone, Debug)]
pub struct DualPathModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub visual_direct: VisualEncoder,
    pub visual_mediated: VisualEncoder,
    pub text: TextEncoder,
    pub proj_direct: Linear,
    pub proj_mediated: Linear,
    pub sca_direct: Option<Sca>,
    pub sca_mediated: Option<Sca>,
    pub head_direct: MlpHead,
    pub head_mediated: MlpHead,
    pub attribute_attention: MultiHeadAttention,
    pub attribute_heads: Vec<Linear>,
    pub fusion: MultiHeadAttention,
    pub fusion_norm: LayerNorm,
    pub head_fused: MlpHead,
}

impl DualPathModel {
    /// Builds a model with parameters drawn from streams derived from `seed`.
    /// Every parameter starts trainable; see [`DualPathModel::apply_freeze`].
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let d = config.joint_dim;
        let vd = config.visual_width;
        let nm = ParamGroup::NewModule;
        let visual_direct = VisualEncoder::new(
            &mut store,
            "visual1",
            config.visual(),
            &mut stream(seed, "visual1", 0),
        )?;
        let visual_mediated = VisualEncoder::new(
            &mut store,
            "visual2",
            config.visual(),
            &mut stream(seed, "visual2", 0),
        )?;
        let text = TextEncoder::new(
            &mut store,
            "text",
            config.text(),
            vocab,
            &mut stream(seed, "text", 0),
        )?;
        let rng = &mut stream(seed, "modules", 0);
        let proj_direct = Linear::new(&mut store, "proj1", vd, d, nm, rng);
        let proj_mediated = Linear::new(&mut store, "proj2", vd, d, nm, rng);
        let sca_direct = if config.use_sca_path1 {
            Some(Sca::new(&mut store, "sca1", d, config.sca_reduction, rng)?)
        } else {
            None
        };
        let sca_mediated = if config.use_sca_path2 {
            Some(Sca::new(&mut store, "sca2", d, config.sca_reduction, rng)?)
        } else {
            None
        };
        let head_direct = MlpHead::new(&mut store, "gender_head1", d, GENDER_CLASSES, nm, rng);
        let attribute_attention =
            MultiHeadAttention::new(&mut store, "attr_attn", d, config.attribute_heads, nm, rng)?;
        let attribute_heads = config
            .attributes
            .iter()
            .map(|a| {
                Linear::new(
                    &mut store,
                    &format!("attr_head.{}", a.name),
                    d,
                    a.classes,
                    nm,
                    rng,
                )
            })
            .collect();
        let head_mediated = MlpHead::new(&mut store, "gender_head2", d, GENDER_CLASSES, nm, rng);
        let fusion =
            MultiHeadAttention::new(&mut store, "fusion", d, config.fusion_heads, nm, rng)?;
        let fusion_norm = LayerNorm::new(&mut store, "fusion_ln", d, nm);
        let head_fused = MlpHead::new(&mut store, "gender_head_fused", d, GENDER_CLASSES, nm, rng);
        Ok(Self {
            config,
            params: store,
            visual_direct,
            visual_mediated,
            text,
            proj_direct,
            proj_mediated,
            sca_direct,
            sca_mediated,
            head_direct,
            head_mediated,
            attribute_attention,
            attribute_heads,
            fusion,
            fusion_norm,
            head_fused,
        })
    }

    /// Applies one policy to both visual encoders and the text encoder.
    pub fn apply_freeze(&mut self, policy: FreezePolicy) -> Result<()> {
        self.visual_direct
            .apply_freeze(&mut self.params, policy.visual)?;
        self.visual_mediated
            .apply_freeze(&mut self.params, policy.visual)?;
        self.text.apply_freeze(&mut self.params, policy.text)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.text.vocab
    }

    fn refine(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        proj: &Linear,
        sca: Option<&Sca>,
        gates: GateOverride,
    ) -> Result<Var> {
        let z = proj.forward(g, store, tokens)?;
        let Some(sca) = sca else {
            return Ok(z);
        };
        let s = g.shape(z).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let side = self.config.grid();
        let f = g.permute(z, &[0, 2, 1])?;
        let f = g.reshape(f, &[b, d, side, side])?;
        let f = sca.forward(g, store, f, gates)?;
        let f = g.reshape(f, &[b, d, n])?;
        g.permute(f, &[0, 2, 1])
    }

    /// Mean token `v1 [B, d]` and direct gender logits.
    pub fn path1_direct(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)> {
        let v1 = g.mean(z, 1)?;
        let logits = self
            .head_direct
            .forward(g, store, v1, self.config.dropout, rng)?;
        Ok((v1, logits))
    }

    /// Mean of the attended tokens `r [B, A, d]` and mediated gender logits.
    pub fn aggregate_attributes(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        r: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)> {
        let v2 = g.mean(r, 1)?;
        let logits = self
            .head_mediated
            .forward(g, store, v2, self.config.dropout, rng)?;
        Ok((v2, logits))
    }

    /// Two-token fusion. Returns `(v_f, fused logits, attention weights)`.
    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        v1: Var,
        v2: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var, Var)> {
        let s = g.shape(v1).to_vec();
        let t1 = g.reshape(v1, &[s[0], 1, s[1]])?;
        let t2 = g.reshape(v2, &[s[0], 1, s[1]])?;
        let u = g.concat(&[t1, t2], 1)?;
        let (h, w) = self.fusion.forward(g, store, u, u, None)?;
        let h = g.add(h, u)?;
        let h = self.fusion_norm.forward(g, store, h)?;
        let mut vf = g.mean(h, 1)?;
        if let Some(r) = rng.as_deref_mut() {
            vf = g.dropout(vf, self.config.dropout, r)?;
        }
        let logits = self
            .head_fused
            .forward(g, store, vf, self.config.dropout, rng)?;
        Ok((vf, logits, w))
    }

    /// Text queries `[1, A, d]` (attribute mode) or `[B, 1, d]` (sample mode).
    fn queries(&self, g: &mut Graph, store: &ParamStore, prompts: &[String]) -> Result<Var> {
        let d = self.config.joint_dim;
        match self.config.query_mode {
            QueryMode::Attribute => {
                let texts: Vec<String> = self
                    .config
                    .attributes
                    .iter()
                    .map(|a| a.query.clone())
                    .collect();
                let q = self.text.encode_many(g, store, &texts)?;
                g.reshape(q, &[1, texts.len(), d])
            }
            QueryMode::Sample => {
                let q = self.text.encode_many(g, store, prompts)?;
                g.reshape(q, &[prompts.len(), 1, d])
            }
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        images: &DenseTensor,
        prompts: &[String],
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutputs> {
        self.forward_with(g, &self.params, images, prompts, opts)
    }

    /// Forward pass reading parameter values from `store`, which must have
    /// the layout of `self.params`.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        images: &DenseTensor,
        prompts: &[String],
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutputs> {
        let b = images.shape().first().copied().unwrap_or(0);
        if self.config.query_mode == QueryMode::Sample && prompts.len() != b {
            return Err(Error::shape("prompts", &[prompts.len()], &[b]));
        }
        let ForwardOptions {
            mut dropout_rng,
            gate_override,
        } = opts;
        let x = g.constant(images);

        let vis1 = self.visual_direct.encode(g, store, x)?;
        let z1 = self.refine(
            g,
            store,
            vis1.tokens,
            &self.proj_direct,
            self.sca_direct.as_ref(),
            gate_override,
        )?;
        let (v1, gender_direct) = self.path1_direct(g, store, z1, dropout_rng.as_deref_mut())?;

        let vis2 = self.visual_mediated.encode(g, store, x)?;
        let z2 = self.refine(
            g,
            store,
            vis2.tokens,
            &self.proj_mediated,
            self.sca_mediated.as_ref(),
            gate_override,
        )?;
        let q = self.queries(g, store, prompts)?;
        let (r, attribute_attention) = self.attribute_attention.forward(g, store, q, z2, None)?;
        let a_count = g.shape(r)[1];
        let mut attributes = Vec::with_capacity(self.attribute_heads.len());
        for (i, head) in self.attribute_heads.iter().enumerate() {
            let ra = g.narrow(r, 1, if a_count == 1 { 0 } else { i }, 1)?;
            let ra = g.reshape(ra, &[b, self.config.joint_dim])?;
            attributes.push(head.forward(g, store, ra)?);
        }
        let (v2, gender_mediated) =
            self.aggregate_attributes(g, store, r, dropout_rng.as_deref_mut())?;
        let (vf, gender_fused, fusion_attention) = self.fuse(g, store, v1, v2, dropout_rng)?;
        Ok(ForwardOutputs {
            gender_direct,
            gender_mediated,
            gender_fused,
            attributes,
            attribute_attention,
            fusion_attention,
            visual_attention_direct: vis1.attention,
            visual_attention_mediated: vis2.attention,
            v1,
            v2,
            vf,
        })
    }
}
