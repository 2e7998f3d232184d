//! Tiny trainable vision-transformer variants with named gradient-hook
//! sites.
//!
//! Three variants share the same transformer trunk and differ in their front
//! end: `vit_tiny` uses plain patch embedding, `deit_tiny` adds an extra
//! learnable token with its own classification head (logits are the mean of
//! the two heads), and `hybrid_tiny` replaces patch embedding with two
//! stride-2 convolutions. Every block exposes four hook sites (`qkv`, `proj`,
//! `attn_dropout`, `mlp`) whose graph nodes are tagged on each forward pass.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CogoError, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::CogoRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    VitTiny,
    DeitTiny,
    HybridTiny,
}

pub const VALID_VARIANTS: &str = "vit_tiny, deit_tiny, hybrid_tiny";

impl Variant {
    pub fn all() -> [Variant; 3] {
        [Variant::VitTiny, Variant::DeitTiny, Variant::HybridTiny]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::VitTiny => "vit_tiny",
            Variant::DeitTiny => "deit_tiny",
            Variant::HybridTiny => "hybrid_tiny",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = CogoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit_tiny" => Ok(Variant::VitTiny),
            "deit_tiny" => Ok(Variant::DeitTiny),
            "hybrid_tiny" => Ok(Variant::HybridTiny),
            other => Err(CogoError::UnknownVariant {
                got: other.to_string(),
                valid: VALID_VARIANTS,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub dropout_p: f32,
}

impl ModelSpec {
    /// The desk-scale configuration every fixture uses.
    pub fn tiny(variant: Variant) -> Self {
        Self {
            variant,
            image_size: 32,
            patch_size: 4,
            embed_dim: 64,
            heads: 4,
            depth: 4,
            num_classes: 10,
            dropout_p: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(CogoError::InvalidSpec(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(CogoError::InvalidSpec(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.variant == Variant::HybridTiny && self.image_size % 4 != 0 {
            return Err(CogoError::InvalidSpec(
                "hybrid_tiny needs image_size divisible by 4 (two stride-2 convs)".into(),
            ));
        }
        if self.depth == 0 || self.num_classes == 0 {
            return Err(CogoError::InvalidSpec(
                "depth and num_classes must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(CogoError::InvalidSpec(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn num_patch_tokens(&self) -> usize {
        let grid = match self.variant {
            Variant::HybridTiny => self.image_size / 4,
            _ => self.image_size / self.patch_size,
        };
        grid * grid
    }

    pub fn token_layout(&self) -> TokenLayout {
        TokenLayout {
            num_patch_tokens: self.num_patch_tokens(),
            class_token_index: 0,
            additional_token_index: match self.variant {
                Variant::DeitTiny => Some(1),
                _ => None,
            },
        }
    }
}

/// Which token index plays which role in the (B, T, D) token tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub num_patch_tokens: usize,
    pub class_token_index: usize,
    pub additional_token_index: Option<usize>,
}

impl TokenLayout {
    pub fn token_count(&self) -> usize {
        self.num_patch_tokens + 1 + usize::from(self.additional_token_index.is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Qkv,
    Proj,
    AttnDropout,
    Mlp,
}

impl SiteKind {
    pub fn all() -> [SiteKind; 4] {
        [
            SiteKind::Qkv,
            SiteKind::Proj,
            SiteKind::AttnDropout,
            SiteKind::Mlp,
        ]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SiteKind::Qkv => "qkv",
            SiteKind::Proj => "proj",
            SiteKind::AttnDropout => "attn_dropout",
            SiteKind::Mlp => "mlp",
        }
    }

    /// Linear layers inside a block whose gradients pass through this site.
    pub fn covered_linears(&self) -> &'static [&'static str] {
        match self {
            SiteKind::Qkv => &["attn.qkv"],
            SiteKind::Proj => &["attn.proj"],
            SiteKind::AttnDropout => &[],
            SiteKind::Mlp => &["mlp.fc1", "mlp.fc2"],
        }
    }
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SiteKind {
    type Err = CogoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qkv" => Ok(SiteKind::Qkv),
            "proj" => Ok(SiteKind::Proj),
            "attn_dropout" => Ok(SiteKind::AttnDropout),
            "mlp" => Ok(SiteKind::Mlp),
            other => Err(CogoError::UnknownSiteKind {
                got: other.to_string(),
            }),
        }
    }
}

/// One hookable location: a site kind within a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HookSite {
    pub block_index: usize,
    pub kind: SiteKind,
}

impl HookSite {
    /// Stable tag the forward pass attaches to the matching graph node.
    pub fn tag(&self) -> String {
        format!("blocks.{}.{}", self.block_index, self.kind.as_str())
    }
}

/// Handles to the interesting nodes of one forward pass.
pub struct ForwardPass {
    pub input: NodeId,
    pub logits: NodeId,
    /// Weight leaf per parameter, populated when weights require gradients.
    pub params: Vec<(String, NodeId)>,
}

/// Forward-pass behavior switches.
pub struct ForwardOpts<'a> {
    pub input_grad: bool,
    pub weight_grad: bool,
    /// Dropout is applied only when an rng is supplied (training); eval and
    /// attack passes stay deterministic.
    pub dropout_rng: Option<&'a mut CogoRng>,
}

impl ForwardOpts<'_> {
    pub fn eval() -> Self {
        ForwardOpts {
            input_grad: false,
            weight_grad: false,
            dropout_rng: None,
        }
    }

    pub fn input_grad() -> Self {
        ForwardOpts {
            input_grad: true,
            weight_grad: false,
            dropout_rng: None,
        }
    }
}

pub struct Model {
    spec: ModelSpec,
    layout: TokenLayout,
    weights: BTreeMap<String, Tensor>,
}

/// Draw node from N(0, std) truncated to two standard deviations.
fn trunc_normal(shape: &[usize], std: f32, rng: &mut CogoRng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let mut draw = rng.normal_f32(0.0, std);
        while draw.abs() > 2.0 * std {
            draw = rng.normal_f32(0.0, std);
        }
        *v = draw;
    }
    t
}

/// Xavier-scale init for a (fan_in, fan_out) linear weight. Plain SGD needs
/// this much signal flow at depth 4; the usual 0.02 everywhere leaves the
/// class-token path too weak to break symmetry.
fn xavier(fan_in: usize, fan_out: usize, rng: &mut CogoRng) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f32).sqrt();
    trunc_normal(&[fan_in, fan_out], std, rng)
}

/// Build a freshly initialized model. Weight draws happen in a fixed name
/// order so identical (spec, rng) always give bit-identical weights.
pub fn build(spec: &ModelSpec, rng: &mut CogoRng) -> Result<Model> {
    spec.validate()?;
    let d = spec.embed_dim;
    let layout = spec.token_layout();
    let tokens = layout.token_count();
    let mut weights = BTreeMap::new();
    let put = |map: &mut BTreeMap<String, Tensor>, name: &str, t: Tensor| {
        map.insert(name.to_string(), t);
    };

    match spec.variant {
        Variant::VitTiny | Variant::DeitTiny => {
            let patch_dim = 3 * spec.patch_size * spec.patch_size;
            put(
                &mut weights,
                "patch_embed.weight",
                xavier(patch_dim, d, rng),
            );
            put(&mut weights, "patch_embed.bias", Tensor::zeros(&[d]));
        }
        Variant::HybridTiny => {
            let mid = 32;
            put(
                &mut weights,
                "stem.conv1.weight",
                trunc_normal(&[3 * 9, mid], (2.0 / 27.0f32).sqrt(), rng),
            );
            put(&mut weights, "stem.conv1.bias", Tensor::zeros(&[mid]));
            put(
                &mut weights,
                "stem.conv2.weight",
                trunc_normal(&[mid * 9, d], (2.0 / (mid as f32 * 9.0)).sqrt(), rng),
            );
            put(&mut weights, "stem.conv2.bias", Tensor::zeros(&[d]));
        }
    }
    put(&mut weights, "cls_token", trunc_normal(&[1, 1, d], 0.02, rng));
    if spec.variant == Variant::DeitTiny {
        put(
            &mut weights,
            "additional_token",
            trunc_normal(&[1, 1, d], 0.02, rng),
        );
    }
    put(
        &mut weights,
        "pos_embed",
        trunc_normal(&[1, tokens, d], 0.02, rng),
    );
    for b in 0..spec.depth {
        let p = |suffix: &str| format!("blocks.{b}.{suffix}");
        put(&mut weights, &p("norm1.gamma"), Tensor::filled(&[d], 1.0));
        put(&mut weights, &p("norm1.beta"), Tensor::zeros(&[d]));
        put(
            &mut weights,
            &p("attn.qkv.weight"),
            xavier(d, 3 * d, rng),
        );
        put(&mut weights, &p("attn.qkv.bias"), Tensor::zeros(&[3 * d]));
        put(
            &mut weights,
            &p("attn.proj.weight"),
            xavier(d, d, rng),
        );
        put(&mut weights, &p("attn.proj.bias"), Tensor::zeros(&[d]));
        put(&mut weights, &p("norm2.gamma"), Tensor::filled(&[d], 1.0));
        put(&mut weights, &p("norm2.beta"), Tensor::zeros(&[d]));
        put(
            &mut weights,
            &p("mlp.fc1.weight"),
            xavier(d, 4 * d, rng),
        );
        put(&mut weights, &p("mlp.fc1.bias"), Tensor::zeros(&[4 * d]));
        put(
            &mut weights,
            &p("mlp.fc2.weight"),
            xavier(4 * d, d, rng),
        );
        put(&mut weights, &p("mlp.fc2.bias"), Tensor::zeros(&[d]));
    }
    put(&mut weights, "norm.gamma", Tensor::filled(&[d], 1.0));
    put(&mut weights, "norm.beta", Tensor::zeros(&[d]));
    put(
        &mut weights,
        "head.weight",
        xavier(d, spec.num_classes, rng),
    );
    put(&mut weights, "head.bias", Tensor::zeros(&[spec.num_classes]));
    if spec.variant == Variant::DeitTiny {
        put(
            &mut weights,
            "head_additional.weight",
            xavier(d, spec.num_classes, rng),
        );
        put(
            &mut weights,
            "head_additional.bias",
            Tensor::zeros(&[spec.num_classes]),
        );
    }

    Ok(Model {
        spec: spec.clone(),
        layout,
        weights,
    })
}

impl Model {
    pub fn from_weights(spec: ModelSpec, weights: BTreeMap<String, Tensor>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.token_layout();
        Ok(Model {
            spec,
            layout,
            weights,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.weights
    }

    fn weight(&self, name: &str) -> &Tensor {
        self.weights
            .get(name)
            .unwrap_or_else(|| panic!("missing weight '{name}'"))
    }

    /// One handle per block for the requested site kind, in block order.
    pub fn hook_sites(&self, kind: SiteKind) -> Vec<HookSite> {
        (0..self.spec.depth)
            .map(|block_index| HookSite { block_index, kind })
            .collect()
    }

    /// Run the forward pass, tagging hook-site nodes, and return handles to
    /// the input leaf and the logits.
    pub fn forward(
        &self,
        g: &mut Graph,
        images: &Tensor,
        opts: ForwardOpts<'_>,
    ) -> Result<ForwardPass> {
        let s = images.shape();
        let valid = s.len() == 4
            && s[1] == 3
            && s[2] == self.spec.image_size
            && s[3] == self.spec.image_size
            && s[0] > 0;
        if !valid {
            return Err(CogoError::InvalidShape {
                op: "forward",
                shape: s.to_vec(),
                reason: format!(
                    "expected (B, 3, {}, {})",
                    self.spec.image_size, self.spec.image_size
                ),
            });
        }
        let batch = s[0];
        let d = self.spec.embed_dim;
        let heads = self.spec.heads;
        let dk = self.spec.head_dim();
        let tokens = self.layout.token_count();
        let ForwardOpts {
            input_grad,
            weight_grad,
            mut dropout_rng,
        } = opts;

        let mut params: Vec<(String, NodeId)> = Vec::new();
        let input = g.leaf(images.clone(), input_grad);

        // local helper: create (and record) a weight leaf
        macro_rules! w {
            ($name:expr) => {{
                let name: String = $name.into();
                let node = g.leaf(self.weight(&name).clone(), weight_grad);
                if weight_grad {
                    params.push((name, node));
                }
                node
            }};
        }
        let dropout = |g: &mut Graph, node: NodeId, rng: &mut Option<&mut CogoRng>| {
            let p = self.spec.dropout_p;
            match rng {
                Some(rng) if p > 0.0 => {
                    let shape = g.shape(node).to_vec();
                    let mut mask = Tensor::zeros(&shape);
                    let keep = 1.0 / (1.0 - p);
                    for v in mask.data_mut() {
                        *v = if rng.uniform_f32(0.0, 1.0) < p { 0.0 } else { keep };
                    }
                    let mask = g.constant(mask);
                    g.mul(node, mask)
                }
                _ => Ok(node),
            }
        };

        // ---- stem: image -> (B, P, D) patch tokens ----
        let patch_tokens = match self.spec.variant {
            Variant::VitTiny | Variant::DeitTiny => {
                let ps = self.spec.patch_size;
                let patches = g.im2col(input, ps, ps, 0)?;
                let p_count = self.spec.num_patch_tokens();
                let flat = g.reshape(patches, &[batch * p_count, 3 * ps * ps])?;
                let wp = w!("patch_embed.weight");
                let bp = w!("patch_embed.bias");
                let emb = g.matmul(flat, wp)?;
                let emb = g.add_bias(emb, bp)?;
                g.reshape(emb, &[batch, p_count, d])?
            }
            Variant::HybridTiny => {
                let mid = 32usize;
                let half = self.spec.image_size / 2;
                let quarter = self.spec.image_size / 4;
                let c1 = g.im2col(input, 3, 2, 1)?;
                let flat1 = g.reshape(c1, &[batch * half * half, 27])?;
                let w1 = w!("stem.conv1.weight");
                let b1 = w!("stem.conv1.bias");
                let h1 = g.matmul(flat1, w1)?;
                let h1 = g.add_bias(h1, b1)?;
                let h1 = g.gelu(h1)?;
                let grid1 = g.reshape(h1, &[batch, half, half, mid])?;
                let chw1 = g.transpose(grid1, &[0, 3, 1, 2])?;
                let c2 = g.im2col(chw1, 3, 2, 1)?;
                let flat2 = g.reshape(c2, &[batch * quarter * quarter, mid * 9])?;
                let w2 = w!("stem.conv2.weight");
                let b2 = w!("stem.conv2.bias");
                let h2 = g.matmul(flat2, w2)?;
                let h2 = g.add_bias(h2, b2)?;
                g.reshape(h2, &[batch, quarter * quarter, d])?
            }
        };

        // ---- prepend class (and additional) tokens, add positions ----
        let cls = w!("cls_token");
        let cls = g.broadcast_rows(cls, batch)?;
        let mut x = match self.spec.variant {
            Variant::DeitTiny => {
                let add = w!("additional_token");
                let add = g.broadcast_rows(add, batch)?;
                let front = g.concat(cls, add, 1)?;
                g.concat(front, patch_tokens, 1)?
            }
            _ => g.concat(cls, patch_tokens, 1)?,
        };
        let pos = w!("pos_embed");
        let pos = g.broadcast_rows(pos, batch)?;
        x = g.add(x, pos)?;

        // ---- transformer blocks ----
        for b in 0..self.spec.depth {
            let p = |suffix: &str| format!("blocks.{b}.{suffix}");
            let g1 = w!(p("norm1.gamma"));
            let b1 = w!(p("norm1.beta"));
            let h = g.layer_norm(x, g1, b1)?;
            let flat = g.reshape(h, &[batch * tokens, d])?;
            let wqkv = w!(p("attn.qkv.weight"));
            let bqkv = w!(p("attn.qkv.bias"));
            let qkv = g.matmul(flat, wqkv)?;
            let qkv = g.add_bias(qkv, bqkv)?;
            let qkv = g.reshape(qkv, &[batch, tokens, 3 * d])?;
            g.tag_node(HookSite { block_index: b, kind: SiteKind::Qkv }.tag(), qkv)?;

            let q = g.slice(qkv, 2, 0, d)?;
            let k = g.slice(qkv, 2, d, 2 * d)?;
            let v = g.slice(qkv, 2, 2 * d, 3 * d)?;
            let split = |g: &mut Graph, t: NodeId| -> Result<NodeId> {
                let t = g.reshape(t, &[batch, tokens, heads, dk])?;
                g.transpose(t, &[0, 2, 1, 3])
            };
            let q = split(g, q)?;
            let k = split(g, k)?;
            let v = split(g, v)?;
            let kt = g.transpose(k, &[0, 1, 3, 2])?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, 1.0 / (dk as f32).sqrt())?;
            let probs = g.softmax(scores, 3)?;
            let probs = dropout(g, probs, &mut dropout_rng)?;
            g.tag_node(
                HookSite { block_index: b, kind: SiteKind::AttnDropout }.tag(),
                probs,
            )?;

            let ctx = g.matmul(probs, v)?;
            let ctx = g.transpose(ctx, &[0, 2, 1, 3])?;
            let ctx = g.reshape(ctx, &[batch * tokens, d])?;
            let wproj = w!(p("attn.proj.weight"));
            let bproj = w!(p("attn.proj.bias"));
            let proj = g.matmul(ctx, wproj)?;
            let proj = g.add_bias(proj, bproj)?;
            let proj = g.reshape(proj, &[batch, tokens, d])?;
            g.tag_node(HookSite { block_index: b, kind: SiteKind::Proj }.tag(), proj)?;
            let proj = dropout(g, proj, &mut dropout_rng)?;
            x = g.add(x, proj)?;

            let g2 = w!(p("norm2.gamma"));
            let b2 = w!(p("norm2.beta"));
            let h2 = g.layer_norm(x, g2, b2)?;
            let flat2 = g.reshape(h2, &[batch * tokens, d])?;
            let wfc1 = w!(p("mlp.fc1.weight"));
            let bfc1 = w!(p("mlp.fc1.bias"));
            let hidden = g.matmul(flat2, wfc1)?;
            let hidden = g.add_bias(hidden, bfc1)?;
            let hidden = g.gelu(hidden)?;
            let hidden = dropout(g, hidden, &mut dropout_rng)?;
            let wfc2 = w!(p("mlp.fc2.weight"));
            let bfc2 = w!(p("mlp.fc2.bias"));
            let out = g.matmul(hidden, wfc2)?;
            let out = g.add_bias(out, bfc2)?;
            let out = g.reshape(out, &[batch, tokens, d])?;
            g.tag_node(HookSite { block_index: b, kind: SiteKind::Mlp }.tag(), out)?;
            let out = dropout(g, out, &mut dropout_rng)?;
            x = g.add(x, out)?;
        }

        // ---- final norm and heads ----
        let gn = w!("norm.gamma");
        let bn = w!("norm.beta");
        let x = g.layer_norm(x, gn, bn)?;
        let cls_idx = self.layout.class_token_index;
        let cls_repr = g.slice(x, 1, cls_idx, cls_idx + 1)?;
        let cls_repr = g.reshape(cls_repr, &[batch, d])?;
        let wh = w!("head.weight");
        let bh = w!("head.bias");
        let head = g.matmul(cls_repr, wh)?;
        let head = g.add_bias(head, bh)?;
        let logits = match self.layout.additional_token_index {
            Some(add_idx) => {
                let add_repr = g.slice(x, 1, add_idx, add_idx + 1)?;
                let add_repr = g.reshape(add_repr, &[batch, d])?;
                let wa = w!("head_additional.weight");
                let ba = w!("head_additional.bias");
                let extra = g.matmul(add_repr, wa)?;
                let extra = g.add_bias(extra, ba)?;
                let sum = g.add(head, extra)?;
                g.scale(sum, 0.5)?
            }
            None => head,
        };
        Ok(ForwardPass {
            input,
            logits,
            params,
        })
    }

    /// Deterministic eval-mode logits for a stack of images.
    pub fn logits_batch(&self, images: &[Tensor]) -> Result<Vec<Tensor>> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let stacked = stack_images(chunk)?;
            let mut g = Graph::new();
            let pass = self.forward(&mut g, &stacked, ForwardOpts::eval())?;
            let logits = g.value(pass.logits);
            let classes = self.spec.num_classes;
            for row in 0..chunk.len() {
                out.push(Tensor::new(
                    vec![classes],
                    logits.data()[row * classes..(row + 1) * classes].to_vec(),
                )?);
            }
        }
        Ok(out)
    }

    /// Argmax predictions for a stack of images.
    pub fn predict_batch(&self, images: &[Tensor]) -> Result<Vec<usize>> {
        Ok(self
            .logits_batch(images)?
            .iter()
            .map(|l| l.argmax())
            .collect())
    }
}

/// Stack (3, H, W) images into one (B, 3, H, W) tensor.
pub fn stack_images(images: &[Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(CogoError::EmptyInput("stack_images"));
    }
    let shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(CogoError::ShapeMismatch {
                op: "stack_images",
                lhs: shape,
                rhs: img.shape().to_vec(),
            });
        }
        data.extend_from_slice(img.data());
    }
    let mut out_shape = vec![images.len()];
    out_shape.extend_from_slice(&shape);
    Tensor::new(out_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use std::rc::Rc;

    fn random_images(n: usize, seed: u64) -> Tensor {
        let mut rng = CogoRng::new(seed, 0);
        let mut t = Tensor::zeros(&[n, 3, 32, 32]);
        rng.fill_uniform(t.data_mut(), 0.0, 1.0);
        t
    }

    #[test]
    fn token_counts_per_variant() {
        let vit = ModelSpec::tiny(Variant::VitTiny);
        assert_eq!(vit.num_patch_tokens(), 64);
        assert_eq!(vit.token_layout().token_count(), 65);

        let deit = ModelSpec::tiny(Variant::DeitTiny);
        let layout = deit.token_layout();
        assert_eq!(layout.token_count(), 66);
        assert_eq!(layout.additional_token_index, Some(1));

        let hybrid = ModelSpec::tiny(Variant::HybridTiny);
        assert_eq!(hybrid.num_patch_tokens(), 64);
        assert_eq!(hybrid.token_layout().token_count(), 65);
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let mut spec = ModelSpec::tiny(Variant::VitTiny);
        spec.embed_dim = 63;
        assert!(build(&spec, &mut CogoRng::new(0, 0)).is_err());
        let mut spec = ModelSpec::tiny(Variant::VitTiny);
        spec.patch_size = 5;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn unknown_variant_parse_error_lists_valid_names() {
        let err = "vit_enormous".parse::<Variant>().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("vit_tiny") && msg.contains("hybrid_tiny"), "{msg}");
    }

    #[test]
    fn forward_produces_finite_logits_for_all_variants() {
        for variant in Variant::all() {
            let spec = ModelSpec::tiny(variant);
            let model = build(&spec, &mut CogoRng::new(1, 0)).unwrap();
            let images = random_images(2, 2);
            let mut g = Graph::new();
            let pass = model.forward(&mut g, &images, ForwardOpts::eval()).unwrap();
            let logits = g.value(pass.logits);
            assert_eq!(logits.shape(), &[2, 10]);
            assert!(logits.is_finite());
        }
    }

    #[test]
    fn identical_images_yield_identical_rows_and_permutation_permutes() {
        let spec = ModelSpec::tiny(Variant::DeitTiny);
        let model = build(&spec, &mut CogoRng::new(3, 0)).unwrap();
        let one = random_images(1, 4);
        let mut dup = Tensor::zeros(&[2, 3, 32, 32]);
        dup.data_mut()[..3 * 32 * 32].copy_from_slice(one.data());
        dup.data_mut()[3 * 32 * 32..].copy_from_slice(one.data());
        let mut g = Graph::new();
        let pass = model.forward(&mut g, &dup, ForwardOpts::eval()).unwrap();
        let logits = g.value(pass.logits).data();
        assert_eq!(&logits[..10], &logits[10..]);

        // permuting a two-image batch permutes the logit rows
        let a = random_images(1, 5).reshape(&[3, 32, 32]).unwrap();
        let b = random_images(1, 6).reshape(&[3, 32, 32]).unwrap();
        let ab = stack_images(&[a.clone(), b.clone()]).unwrap();
        let ba = stack_images(&[b, a]).unwrap();
        let mut g1 = Graph::new();
        let l_ab = model.forward(&mut g1, &ab, ForwardOpts::eval()).unwrap();
        let mut g2 = Graph::new();
        let l_ba = model.forward(&mut g2, &ba, ForwardOpts::eval()).unwrap();
        let (d_ab, d_ba) = (g1.value(l_ab.logits).data(), g2.value(l_ba.logits).data());
        assert_eq!(&d_ab[..10], &d_ba[10..]);
        assert_eq!(&d_ab[10..], &d_ba[..10]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let spec = ModelSpec::tiny(Variant::VitTiny);
        let model = build(&spec, &mut CogoRng::new(7, 0)).unwrap();
        let images = random_images(1, 8);
        let mut g = Graph::new();
        model.forward(&mut g, &images, ForwardOpts::eval()).unwrap();
        for b in 0..spec.depth {
            let site = HookSite { block_index: b, kind: SiteKind::AttnDropout };
            let node = g.node_by_tag(&site.tag()).unwrap();
            let probs = g.value(node);
            let t = spec.token_layout().token_count();
            assert_eq!(probs.shape(), &[1, spec.heads, t, t]);
            for row in probs.data().chunks(t) {
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-5, "attention row sum {sum}");
            }
        }
    }

    #[test]
    fn qkv_sites_have_expected_count_and_width() {
        let spec = ModelSpec::tiny(Variant::VitTiny);
        let model = build(&spec, &mut CogoRng::new(9, 0)).unwrap();
        let sites = model.hook_sites(SiteKind::Qkv);
        assert_eq!(sites.len(), 4);
        let images = random_images(1, 10);
        let mut g = Graph::new();
        model.forward(&mut g, &images, ForwardOpts::eval()).unwrap();
        for site in &sites {
            let node = g.node_by_tag(&site.tag()).unwrap();
            let shape = g.shape(node);
            assert_eq!(*shape.last().unwrap(), 3 * spec.embed_dim);
        }
    }

    #[test]
    fn hook_site_taxonomy_covers_every_block_linear_exactly_once() {
        let all_linears = ["attn.qkv", "attn.proj", "mlp.fc1", "mlp.fc2"];
        let mut seen = Vec::new();
        for kind in SiteKind::all() {
            seen.extend_from_slice(kind.covered_linears());
        }
        seen.sort_unstable();
        let mut want = all_linears.to_vec();
        want.sort_unstable();
        assert_eq!(seen, want);
    }

    #[test]
    fn eval_forward_is_bit_deterministic_and_identity_hooks_neutral() {
        let spec = ModelSpec::tiny(Variant::DeitTiny);
        let model = build(&spec, &mut CogoRng::new(11, 0)).unwrap();
        let images = random_images(2, 12);
        let run = |with_hooks: bool| {
            let mut g = Graph::new();
            let pass = model
                .forward(&mut g, &images, ForwardOpts::input_grad())
                .unwrap();
            if with_hooks {
                for kind in SiteKind::all() {
                    for site in model.hook_sites(kind) {
                        let node = g.node_by_tag(&site.tag()).unwrap();
                        g.register_hook(node, Rc::new(|t: &Tensor| Ok(t.clone())))
                            .unwrap();
                    }
                }
            }
            let loss = g.cross_entropy(pass.logits, &[3, 7]).unwrap();
            g.backward(loss).unwrap();
            (
                g.value(pass.logits).data().to_vec(),
                g.grad(pass.input).unwrap().data().to_vec(),
            )
        };
        let (l1, g1) = run(false);
        let (l2, g2) = run(false);
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
        let (l3, g3) = run(true);
        assert_eq!(l1, l3);
        assert_eq!(g1, g3);
    }

    #[test]
    fn every_parameter_receives_a_finite_gradient() {
        for variant in Variant::all() {
            let spec = ModelSpec::tiny(variant);
            let model = build(&spec, &mut CogoRng::new(13, 0)).unwrap();
            let images = random_images(2, 14);
            let mut g = Graph::new();
            let pass = model
                .forward(
                    &mut g,
                    &images,
                    ForwardOpts {
                        input_grad: false,
                        weight_grad: true,
                        dropout_rng: None,
                    },
                )
                .unwrap();
            let loss = g.cross_entropy(pass.logits, &[1, 2]).unwrap();
            g.backward(loss).unwrap();
            assert_eq!(pass.params.len(), model.weights().len());
            for (name, node) in &pass.params {
                let grad = g
                    .grad(*node)
                    .unwrap_or_else(|| panic!("{variant}: no grad for {name}"));
                assert!(grad.is_finite(), "{variant}: non-finite grad for {name}");
            }
        }
    }

    #[test]
    fn batch_shape_mismatch_is_an_error() {
        let spec = ModelSpec::tiny(Variant::VitTiny);
        let model = build(&spec, &mut CogoRng::new(15, 0)).unwrap();
        let bad = Tensor::zeros(&[2, 1, 32, 32]);
        let mut g = Graph::new();
        assert!(model.forward(&mut g, &bad, ForwardOpts::eval()).is_err());
    }
}
