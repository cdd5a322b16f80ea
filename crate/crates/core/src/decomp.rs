//! Saliency decomposition: a compact attention network that splits an
//! image into complementary foreground and background saliency maps.
//!
//! The subnetwork is an hourglass of five channel-attention blocks with
//! aggressive 4×4 pooling, so even its bottleneck sees most of the
//! image. Each attention block embeds its input with a 1×1 convolution
//! unit, summarizes the embedding into per-channel weights (global
//! average pool → fully-connected → softmax, so the weights are a
//! distribution over channels), rescales the embedding by those
//! weights, and refines with a 3×3 convolution unit.
//!
//! The final feature `B^f` is the foreground evidence; its *self
//! reversal* — per channel plane, `max − x` — is the background
//! evidence `B^b`. Two independent bare 1×1 convolutions with bias turn
//! the two features into sigmoid saliency maps `S^f` and `S^b`. The
//! background mask target `Ỹ` used by the loss is the complement
//! `1 − Y` of the foreground mask.

use rand_chacha::ChaCha8Rng;

use crate::layers::{check_extent, scale_channels, Conv2d, ConvUnit, Cx, Linear, ParamStore};
use crate::ops::{self, ConvSpec};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::Result;

/// Per-plane reversal: each `(sample, channel)` plane is mapped to
/// `max_plane − x`, swapping the roles of strong and weak responses.
pub fn self_reversal(x: &Tensor) -> Result<Tensor> {
    Ok(ops::self_reversal_forward(x)?.0)
}

/// Background mask target: the complement `1 − y` of the foreground
/// mask, so a pixel is background exactly when it is not foreground.
pub fn background_target(y: &Tensor) -> Tensor {
    Tensor::from_vec(y.shape(), y.data().iter().map(|v| 1.0 - v).collect())
}

/// One channel-attention block.
pub struct AttentionBlock {
    pub embed: ConvUnit,
    pub fc: Linear,
    pub out: ConvUnit,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        AttentionBlock {
            embed: ConvUnit::new(store, rng, &format!("{name}.embed"), cin, cout, ConvSpec::same(1, 1)),
            fc: Linear::new(store, rng, &format!("{name}.fc"), cout, cout, true),
            out: ConvUnit::new(store, rng, &format!("{name}.out"), cout, cout, ConvSpec::same(3, 1)),
        }
    }

    /// Returns the block output and the channel weight distribution
    /// (`[n, c]`, rows summing to one).
    pub fn forward_with_weights(&self, cx: &mut Cx, x: Var) -> Result<(Var, Var)> {
        let b = self.embed.forward(cx, x)?;
        let g = cx.tape.global_avg_pool(b)?;
        let logits = self.fc.forward(cx, g)?;
        let w = cx.tape.softmax(logits);
        let scaled = cx.tape.channel_scale(b, w)?;
        Ok((self.out.forward(cx, scaled)?, w))
    }

    pub fn forward(&self, cx: &mut Cx, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(cx, x)?.0)
    }
}

/// Saliency maps and the features they came from.
pub struct DecompOutputs {
    pub b_f: Var,
    pub b_b: Var,
    /// Foreground saliency, `[n, h, w, 1]` in (0, 1).
    pub s_f: Var,
    /// Background saliency, `[n, h, w, 1]` in (0, 1).
    pub s_b: Var,
}

/// The decomposition subnetwork.
pub struct DecompositionNet {
    pub stem: ConvUnit,
    pub b1: AttentionBlock,
    pub b2: AttentionBlock,
    pub b3: AttentionBlock,
    pub b4: AttentionBlock,
    pub b5: AttentionBlock,
    pub head_f: Conv2d,
    pub head_b: Conv2d,
}

impl DecompositionNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: f64) -> Self {
        let s = |c: usize| scale_channels(c, width);
        let (c32, c64, c128, c256) = (s(32), s(64), s(128), s(256));
        DecompositionNet {
            stem: ConvUnit::new(store, rng, &format!("{name}.stem"), 1, c32, ConvSpec::same(3, 1)),
            b1: AttentionBlock::new(store, rng, &format!("{name}.b1"), c32, c64),
            b2: AttentionBlock::new(store, rng, &format!("{name}.b2"), c64, c128),
            b3: AttentionBlock::new(store, rng, &format!("{name}.b3"), c128, c256),
            // The two expanding blocks receive skip concatenations, so
            // their embeddings absorb the widened channel counts.
            b4: AttentionBlock::new(store, rng, &format!("{name}.b4"), c256 + c128, c64),
            b5: AttentionBlock::new(store, rng, &format!("{name}.b5"), c64 + c64, c32),
            head_f: Conv2d::new(store, rng, &format!("{name}.head_f"), c32, 1, ConvSpec::same(1, 1), true),
            head_b: Conv2d::new(store, rng, &format!("{name}.head_b"), c32, 1, ConvSpec::same(1, 1), true),
        }
    }

    /// `img`: `[n, h, w, 1]`, h and w divisible by 16.
    pub fn forward(&self, cx: &mut Cx, img: Var) -> Result<DecompOutputs> {
        let (_, h, w, _) = cx.tape.value(img).dims4("decompose")?;
        check_extent("decompose", h, 16)?;
        check_extent("decompose", w, 16)?;
        let t0 = self.stem.forward(cx, img)?;
        let t1 = self.b1.forward(cx, t0)?;
        let p1 = cx.tape.max_pool(t1, 4)?;
        let t2 = self.b2.forward(cx, p1)?;
        let p2 = cx.tape.max_pool(t2, 4)?;
        let t3 = self.b3.forward(cx, p2)?;
        let u4 = cx.tape.upsample(t3, 4)?;
        let in4 = cx.tape.concat(&[u4, t2])?;
        let t4 = self.b4.forward(cx, in4)?;
        let u5 = cx.tape.upsample(t4, 4)?;
        let in5 = cx.tape.concat(&[u5, t1])?;
        let t5 = self.b5.forward(cx, in5)?;
        let b_b = cx.tape.self_reversal(t5)?;
        let lf = self.head_f.forward(cx, t5)?;
        let lb = self.head_b.forward(cx, b_b)?;
        Ok(DecompOutputs { b_f: t5, b_b, s_f: cx.tape.sigmoid(lf), s_b: cx.tape.sigmoid(lb) })
    }
}
