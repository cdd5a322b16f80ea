//! Full network assembly: decomposition subnet feeding a coupled
//! encoder–decoder.
//!
//! The input image I produces a foreground/background saliency pair
//! (S^f, S^b). The main encoder consumes A_0 = I ⊕ S^f through five
//! convolution blocks, the first four followed by learned context
//! pooling; a parallel auxiliary stream encodes I ⊕ S^b. After every
//! stage the two streams meet in an aggregation unit whose coupler
//! reinforces the foreground features with prototypes extracted from
//! the reversed background embedding. The decoder mirrors the encoder,
//! fusing each upsampled stage with the matching pre-pool encoder
//! feature through cross-correlation fusion, and a final 1×1
//! convolution plus sigmoid emits the probability map Ŷ at the input
//! resolution.
//!
//! Three structural switches cover the ablation lattice: pooling
//! (learned context pooling vs. plain max pooling), skip fusion
//! (cross-correlation vs. concatenation), and coupler (full
//! dependency-aware unit, pure concatenation of the two streams, or no
//! background stream at all). Every variant shares parameter naming for
//! the structure it retains, so reduced graphs can be compared against
//! the full model entry by entry.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ccf::CcfFusion;
use crate::dar::{AggregationUnit, AuxTrace, AuxiliaryStream, DarCoupler};
use crate::dcp::DcpPooling;
use crate::decomp::DecompositionNet;
use crate::layers::{
    check_extent, scale_channels, Conv2d, ConvUnit, Cx, ParamKind, ParamStore,
};
use crate::ops::ConvSpec;
use crate::tape::Var;
use crate::{Error, Result};

/// Downsampling operator after each of the first four encoder blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    /// Learned window-context pooling.
    Dcp,
    /// Plain 2×2 max pooling (ablation).
    Max,
}

/// Skip-connection fusion in the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    /// Cross-correlation channel weighting, then merge.
    Ccf,
    /// Plain concatenation, then merge (ablation).
    Concat,
}

/// How the foreground and background streams are coupled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplerKind {
    /// Full dependency-aware reinforcement.
    Dar,
    /// Concatenate foreground with the reversed background (ablation;
    /// exactly the Dar graph with its projection zeroed).
    Concat,
    /// No background stream at all (ablation): the network reduces to
    /// the plain encoder–decoder on I ⊕ S^f.
    None,
}

/// Structural configuration of the network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetOptions {
    /// Channel width multiplier applied to every table.
    pub width: f64,
    /// Encoder stage channels before width scaling; the decoder and
    /// auxiliary stream mirror this table.
    pub channels: [usize; 5],
    /// Context-pooling bandwidth.
    pub tau: usize,
    pub pooling: PoolKind,
    pub fusion: FusionKind,
    pub coupler: CouplerKind,
}

impl Default for NetOptions {
    fn default() -> Self {
        NetOptions {
            width: 1.0,
            channels: [32, 64, 128, 256, 512],
            tau: 1,
            pooling: PoolKind::Dcp,
            fusion: FusionKind::Ccf,
            coupler: CouplerKind::Dar,
        }
    }
}

impl NetOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::Config(format!("width {} must be positive", self.width)));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("channel table entries must be positive".into()));
        }
        Ok(())
    }

    /// Stage channels after width scaling.
    pub fn scaled(&self) -> [usize; 5] {
        self.channels.map(|c| scale_channels(c, self.width))
    }
}

enum Pool {
    Dcp(DcpPooling),
    Max,
}

impl Pool {
    fn forward(&self, cx: &mut Cx, x: Var) -> Result<Var> {
        match self {
            Pool::Dcp(p) => p.forward(cx, x),
            Pool::Max => cx.tape.max_pool(x, 2),
        }
    }
}

enum Fusion {
    Ccf(CcfFusion),
    Concat(ConvUnit),
}

impl Fusion {
    fn forward(&self, cx: &mut Cx, xe: Var, xd: Var) -> Result<Var> {
        match self {
            Fusion::Ccf(f) => f.forward(cx, xe, xd),
            Fusion::Concat(merge) => {
                let up = cx.tape.upsample(xd, 2)?;
                let cat = cx.tape.concat(&[xe, up])?;
                merge.forward(cx, cat)
            }
        }
    }
}

enum Coupling {
    Dar(AggregationUnit),
    Concat { fg: ConvUnit, bg: ConvUnit },
}

impl Coupling {
    fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: CouplerKind,
        cf: usize,
        cb: usize,
    ) -> Self {
        match kind {
            CouplerKind::Dar => Coupling::Dar(AggregationUnit::new(store, rng, name, cf, cb)),
            CouplerKind::Concat => Coupling::Concat {
                fg: ConvUnit::new(store, rng, &format!("{name}.fg"), cf, cf, ConvSpec::same(1, 1)),
                bg: ConvUnit::new(store, rng, &format!("{name}.bg"), cb, cf, ConvSpec::same(3, 1)),
            },
            CouplerKind::None => unreachable!("coupler=none builds no aggregation units"),
        }
    }

    /// Returns the coupled features plus the attention map when the
    /// coupler has one.
    fn forward(&self, cx: &mut Cx, x_f: Var, x_b: Var) -> Result<(Var, Option<Var>)> {
        match self {
            Coupling::Dar(unit) => {
                let (out, attn) = unit.forward_with_attention(cx, x_f, x_b)?;
                Ok((out, Some(attn)))
            }
            Coupling::Concat { fg, bg } => {
                let f = fg.forward(cx, x_f)?;
                let b = bg.forward(cx, x_b)?;
                let rev = cx.tape.self_reversal(b)?;
                Ok((cx.tape.concat(&[f, rev])?, None))
            }
        }
    }

    fn dar(&self) -> Option<&DarCoupler> {
        match self {
            Coupling::Dar(unit) => Some(&unit.dar),
            Coupling::Concat { .. } => None,
        }
    }
}

/// Everything one forward pass produces, as live tape nodes.
pub struct ForwardTrace {
    /// Foreground / background saliency maps, `[n, h, w, 1]` in (0, 1).
    pub s_f: Var,
    pub s_b: Var,
    /// Encoder block outputs E^f_1..E^f_5 (post-pool for stages 1–4).
    pub enc: Vec<Var>,
    /// Pre-pool convolution features T_1..T_5 (decoder skip sources).
    pub enc_pre: Vec<Var>,
    /// Aggregated couplings A_1..A_9 (empty without a background stream).
    pub agg: Vec<Var>,
    /// Coupler attention maps, one `[n, h, w, 1]` per aggregation unit
    /// (empty unless the dependency-aware coupler is selected).
    pub attn: Vec<Var>,
    /// Decoder fusion outputs D^f_1..D^f_4.
    pub dec: Vec<Var>,
    /// Auxiliary (background) stream activations.
    pub aux: Option<AuxTrace>,
    /// Final probability map, `[n, h, w, 1]` in (0, 1).
    pub y_hat: Var,
}

/// The assembled network.
pub struct DcNet {
    pub decomp: DecompositionNet,
    enc: Vec<ConvUnit>,
    pools: Vec<Pool>,
    aux: Option<AuxiliaryStream>,
    agg: Vec<Coupling>,
    dec: Vec<ConvUnit>,
    fuse: Vec<Fusion>,
    head: Conv2d,
    channels: [usize; 5],
    pub options: NetOptions,
}

impl DcNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        options: NetOptions,
    ) -> Result<Self> {
        options.validate()?;
        let c = options.scaled();
        let with_bg = options.coupler != CouplerKind::None;

        let decomp = DecompositionNet::new(store, rng, &format!("{name}.decomp"), options.width);

        // Encoder: block 1 reads I ⊕ S^f (2 channels); later blocks read
        // the previous stage — doubled in width when aggregation
        // concatenates the background stream in.
        let mut enc = Vec::with_capacity(5);
        for j in 0..5 {
            let cin = if j == 0 {
                2
            } else if with_bg {
                2 * c[j - 1]
            } else {
                c[j - 1]
            };
            enc.push(ConvUnit::new(
                store,
                rng,
                &format!("{name}.enc{}", j + 1),
                cin,
                c[j],
                ConvSpec::same(3, 1),
            ));
        }
        let mut pools = Vec::with_capacity(4);
        for (j, &cj) in c.iter().enumerate().take(4) {
            pools.push(match options.pooling {
                PoolKind::Dcp => Pool::Dcp(DcpPooling::new(
                    store,
                    rng,
                    &format!("{name}.pool{}", j + 1),
                    cj,
                    options.tau,
                )),
                PoolKind::Max => Pool::Max,
            });
        }

        let aux = with_bg
            .then(|| AuxiliaryStream::new(store, rng, &format!("{name}.aux"), 2, &c));

        // Aggregation units 1–5 couple encoder stages, 6–9 decoder stages.
        let mut agg = Vec::new();
        if with_bg {
            for (j, &cj) in c.iter().enumerate() {
                agg.push(Coupling::build(
                    store,
                    rng,
                    &format!("{name}.agg{}", j + 1),
                    options.coupler,
                    cj,
                    cj,
                ));
            }
            for j in 1..=4 {
                let d = c[4 - j];
                agg.push(Coupling::build(
                    store,
                    rng,
                    &format!("{name}.agg{}", 5 + j),
                    options.coupler,
                    d,
                    d,
                ));
            }
        }

        // Decoder convolutions and skip fusions. Stage j shrinks the
        // deepest remaining feature to the mirrored channel count, then
        // fuses with the matching pre-pool encoder feature at 2× extent.
        let mut dec = Vec::with_capacity(4);
        let mut fuse = Vec::with_capacity(4);
        for j in 1..=4 {
            let cin = if with_bg { 2 * c[5 - j] } else { c[5 - j] };
            let cout = c[4 - j];
            dec.push(ConvUnit::new(
                store,
                rng,
                &format!("{name}.dec{j}"),
                cin,
                cout,
                ConvSpec::same(3, 1),
            ));
            fuse.push(match options.fusion {
                FusionKind::Ccf => Fusion::Ccf(CcfFusion::new(
                    store,
                    rng,
                    &format!("{name}.fuse{j}"),
                    cout,
                    cout,
                )),
                FusionKind::Concat => Fusion::Concat(ConvUnit::new(
                    store,
                    rng,
                    &format!("{name}.fuse{j}.merge"),
                    2 * cout,
                    cout,
                    ConvSpec::same(3, 1),
                )),
            });
        }

        let head_cin = if with_bg { 2 * c[0] } else { c[0] };
        let head =
            Conv2d::new(store, rng, &format!("{name}.head"), head_cin, 1, ConvSpec::same(1, 1), true);

        Ok(DcNet { decomp, enc, pools, aux, agg, dec, fuse, head, channels: c, options })
    }

    pub fn channels(&self) -> [usize; 5] {
        self.channels
    }

    /// Full forward pass. `img`: `[n, h, w, 1]`, extents divisible by 16.
    pub fn forward(&self, cx: &mut Cx, img: Var) -> Result<ForwardTrace> {
        let shape = cx.tape.value(img).shape().to_vec();
        let [_, h, w, ci] = shape[..] else {
            return Err(Error::shape("dcnet", format!("input {shape:?}, expected [n,h,w,1]")));
        };
        if ci != 1 {
            return Err(Error::shape("dcnet", format!("input has {ci} channels, expected 1")));
        }
        check_extent("dcnet", h, 16)?;
        check_extent("dcnet", w, 16)?;

        let d = self.decomp.forward(cx, img)?;
        let a0 = cx.tape.concat(&[img, d.s_f])?;
        let aux = match &self.aux {
            Some(stream) => {
                let bg_in = cx.tape.concat(&[img, d.s_b])?;
                Some(stream.forward(cx, bg_in)?)
            }
            None => None,
        };

        let mut enc_pre = Vec::with_capacity(5);
        let mut enc_out = Vec::with_capacity(5);
        let mut agg_out = Vec::new();
        let mut attn_out = Vec::new();
        let mut cursor = a0;
        for j in 0..5 {
            let t = self.enc[j].forward(cx, cursor)?;
            enc_pre.push(t);
            let e = if j < 4 { self.pools[j].forward(cx, t)? } else { t };
            enc_out.push(e);
            cursor = match (self.agg.get(j), aux.as_ref()) {
                (Some(unit), Some(trace)) => {
                    let partner = if j < 4 { trace.pooled[j] } else { trace.acts[4] };
                    self.check_pair(cx, "aggregation", j + 1, e, partner)?;
                    let (a, attn) = unit.forward(cx, e, partner)?;
                    agg_out.push(a);
                    attn_out.extend(attn);
                    a
                }
                _ => e,
            };
        }

        let mut dec_out = Vec::with_capacity(4);
        for j in 1..=4 {
            let xd = self.dec[j - 1].forward(cx, cursor)?;
            let skip = enc_pre[4 - j];
            let fused = self.fuse[j - 1].forward(cx, skip, xd)?;
            dec_out.push(fused);
            cursor = match (self.agg.get(4 + j), aux.as_ref()) {
                (Some(unit), Some(trace)) => {
                    let partner = trace.dec[j - 1];
                    self.check_pair(cx, "aggregation", 5 + j, fused, partner)?;
                    let (a, attn) = unit.forward(cx, fused, partner)?;
                    agg_out.push(a);
                    attn_out.extend(attn);
                    a
                }
                _ => fused,
            };
        }

        let logits = self.head.forward(cx, cursor)?;
        let y_hat = cx.tape.sigmoid(logits);

        Ok(ForwardTrace {
            s_f: d.s_f,
            s_b: d.s_b,
            enc: enc_out,
            enc_pre,
            agg: agg_out,
            attn: attn_out,
            dec: dec_out,
            aux,
            y_hat,
        })
    }

    fn check_pair(&self, cx: &Cx, what: &str, index: usize, a: Var, b: Var) -> Result<()> {
        let sa = cx.tape.value(a).shape();
        let sb = cx.tape.value(b).shape();
        if sa[..3] != sb[..3] {
            return Err(Error::shape(
                "dcnet",
                format!("{what} unit {index}: stream shapes {sa:?} vs {sb:?}"),
            ));
        }
        Ok(())
    }

    /// Zero every coupler projection, reducing each aggregation unit to
    /// an exact concatenation of its two streams.
    pub fn zero_dar_projections(&self, store: &mut ParamStore) {
        for unit in &self.agg {
            if let Some(dar) = unit.dar() {
                dar.zero_projection(store);
            }
        }
    }
}

/// Parameter tally for one top-level module.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleCount {
    pub module: String,
    /// Trainable scalars.
    pub weights: usize,
    /// Running statistics.
    pub stats: usize,
}

/// Whole-model report: per-module parameter counts plus a
/// multiply-accumulate estimate for one forward pass at a given extent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSummary {
    pub modules: Vec<ModuleCount>,
    pub total_weights: usize,
    pub total_stats: usize,
    /// Convolution and linear multiply-accumulates per sample.
    pub macs: u64,
}

/// Group the store's entries by the path segment after `prefix.`.
pub fn model_summary(
    store: &ParamStore,
    prefix: &str,
    net: &DcNet,
    extent: usize,
) -> ModelSummary {
    let mut modules: Vec<ModuleCount> = Vec::new();
    for idx in store.indices() {
        let name = store.name(idx);
        let local = name.strip_prefix(prefix).and_then(|s| s.strip_prefix('.')).unwrap_or(name);
        let module = local.split('.').next().unwrap_or(local).to_string();
        let numel = store.value(idx).numel();
        let slot = match modules.iter_mut().find(|m| m.module == module) {
            Some(m) => m,
            None => {
                modules.push(ModuleCount { module, weights: 0, stats: 0 });
                modules.last_mut().unwrap()
            }
        };
        match store.kind(idx) {
            ParamKind::Weight => slot.weights += numel,
            ParamKind::Stat => slot.stats += numel,
        }
    }
    let total_weights = modules.iter().map(|m| m.weights).sum();
    let total_stats = modules.iter().map(|m| m.stats).sum();
    ModelSummary { modules, total_weights, total_stats, macs: macs_estimate(net, extent) }
}

/// Convolution/linear multiply-accumulates for one sample at
/// `extent`×`extent`, from shape arithmetic alone.
fn macs_estimate(net: &DcNet, extent: usize) -> u64 {
    let c = net.channels;
    let e2 = |e: usize| (e * e) as u64;
    let conv = |k: usize, cin: usize, cout: usize, e: usize| (k * k * cin * cout) as u64 * e2(e);
    let mut total = 0u64;

    // Decomposition subnet: stem, five attention blocks (embed 1×1,
    // squeeze linear, out 3×3), two heads; pools shrink by 4 twice.
    let w = net.options.width;
    let d = [
        scale_channels(32, w),
        scale_channels(64, w),
        scale_channels(128, w),
        scale_channels(256, w),
    ];
    let attn = |cin: usize, cout: usize, e: usize| {
        conv(1, cin, cout, e) + (cout * cout) as u64 + conv(3, cout, cout, e)
    };
    total += conv(3, 1, d[0], extent);
    total += attn(d[0], d[1], extent);
    total += attn(d[1], d[2], extent / 4);
    total += attn(d[2], d[3], extent / 16);
    total += attn(d[3] + d[2], d[1], extent / 4);
    total += attn(d[1] + d[1], d[0], extent);
    total += 2 * conv(1, d[0], 1, extent);

    let with_bg = net.options.coupler != CouplerKind::None;
    let dcp = net.options.pooling == PoolKind::Dcp;
    let dar = net.options.coupler == CouplerKind::Dar;

    // Encoder (+ pooling projections) and auxiliary stream.
    let mut e = extent;
    for j in 0..5 {
        let cin = if j == 0 {
            2
        } else if with_bg {
            2 * c[j - 1]
        } else {
            c[j - 1]
        };
        total += conv(3, cin, c[j], e);
        if with_bg {
            let acin = if j == 0 { 2 } else { c[j - 1] };
            total += conv(3, acin, c[j], e);
        }
        if j < 4 {
            if dcp {
                // 2×2 depthwise projection with 4 filters per channel.
                total += (4 * c[j]) as u64 * 4 * e2(e / 2);
            }
            e /= 2;
        }
    }

    // Aggregation units: fg 1×1, bg 3×3, plus the coupler's pyramid
    // (three 3×3 dilated convs on each stream), projections, and the
    // 1×1 expansion.
    if with_bg {
        let agg = |cf: usize, e: usize| {
            let mut m = conv(1, cf, cf, e) + conv(3, cf, cf, e);
            if dar {
                m += 2 * (3 * conv(3, cf, cf, e) + (3 * cf * cf) as u64);
                m += (cf * cf) as u64 * e2(e); // attention scores + outer
                m += conv(1, cf, 2 * cf, e);
            }
            m
        };
        let enc_extents = [extent / 2, extent / 4, extent / 8, extent / 16, extent / 16];
        for (j, &cj) in c.iter().enumerate() {
            total += agg(cj, enc_extents[j]);
        }
        let dec_extents = [extent / 8, extent / 4, extent / 2, extent];
        for j in 1..=4 {
            total += agg(c[4 - j], dec_extents[j - 1]);
        }
        // Auxiliary decoder convolutions.
        for j in 1..=4 {
            total += conv(3, c[5 - j] + c[4 - j], c[4 - j], dec_extents[j - 1]);
        }
    }

    // Decoder convolutions, fusions, head.
    let dec_in_extents = [extent / 16, extent / 8, extent / 4, extent / 2];
    for j in 1..=4 {
        let cin = if with_bg { 2 * c[5 - j] } else { c[5 - j] };
        let cout = c[4 - j];
        total += conv(3, cin, cout, dec_in_extents[j - 1]);
        let out_e = dec_in_extents[j - 1] * 2;
        match net.options.fusion {
            FusionKind::Ccf => {
                // Gram matrix + two relation products + merge conv.
                total += (cout * cout) as u64 * e2(out_e) + 2 * (cout * cout) as u64;
                total += conv(3, 2 * cout, cout, out_e);
            }
            FusionKind::Concat => total += conv(3, 2 * cout, cout, out_e),
        }
    }
    let head_cin = if with_bg { 2 * c[0] } else { c[0] };
    total += conv(1, head_cin, 1, extent);
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{init_rng, Phase};
    use crate::testutil::{rng_tensor, Rng64};
    use crate::tensor::Tensor;

    fn small_opts() -> NetOptions {
        NetOptions { width: 0.125, ..NetOptions::default() }
    }

    fn randomize_betas(store: &mut ParamStore, rng: &mut Rng64) {
        for idx in store.indices().collect::<Vec<_>>() {
            if store.name(idx).ends_with(".beta") {
                let t = store.value(idx).clone();
                let vals: Vec<f64> = (0..t.numel()).map(|_| rng.uniform(0.25, 0.75)).collect();
                *store.value_mut(idx) = Tensor::from_vec(t.shape(), vals);
            }
        }
    }

    #[test]
    fn shape_walk_at_64() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(11);
        let net = DcNet::new(&mut store, &mut rng, "net", small_opts()).unwrap();
        let c = net.channels();
        assert_eq!(c, [4, 8, 16, 32, 64]);

        // Train phase: batch statistics keep activations calibrated, so
        // the sigmoid stays strictly inside (0, 1) even untrained.
        let mut data_rng = Rng64::new(60);
        let img = rng_tensor(&mut data_rng, &[1, 64, 64, 1]);
        let mut cx = Cx::new(&mut store, Phase::Train);
        let img_v = cx.tape.leaf(img, false).unwrap();
        let trace = net.forward(&mut cx, img_v).unwrap();

        // Saliency maps at input extent.
        assert_eq!(cx.tape.value(trace.s_f).shape(), &[1, 64, 64, 1]);
        // Encoder: post-pool extents 32, 16, 8, 4, then unpooled 4.
        let enc_shapes: Vec<Vec<usize>> =
            trace.enc.iter().map(|&v| cx.tape.value(v).shape().to_vec()).collect();
        assert_eq!(
            enc_shapes,
            vec![
                vec![1, 32, 32, c[0]],
                vec![1, 16, 16, c[1]],
                vec![1, 8, 8, c[2]],
                vec![1, 4, 4, c[3]],
                vec![1, 4, 4, c[4]],
            ]
        );
        // Aggregations double the channel count at matched extent.
        let agg_shapes: Vec<Vec<usize>> =
            trace.agg.iter().map(|&v| cx.tape.value(v).shape().to_vec()).collect();
        assert_eq!(
            agg_shapes,
            vec![
                vec![1, 32, 32, 2 * c[0]],
                vec![1, 16, 16, 2 * c[1]],
                vec![1, 8, 8, 2 * c[2]],
                vec![1, 4, 4, 2 * c[3]],
                vec![1, 4, 4, 2 * c[4]],
                vec![1, 8, 8, 2 * c[3]],
                vec![1, 16, 16, 2 * c[2]],
                vec![1, 32, 32, 2 * c[1]],
                vec![1, 64, 64, 2 * c[0]],
            ]
        );
        // One single-channel attention map per aggregation, in (0, 1).
        assert_eq!(trace.attn.len(), trace.agg.len());
        for (&attn, agg_shape) in trace.attn.iter().zip(&agg_shapes) {
            let t = cx.tape.value(attn);
            assert_eq!(t.shape(), &[agg_shape[0], agg_shape[1], agg_shape[2], 1]);
            assert!(t.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        // Decoder climbs back to full extent with mirrored channels.
        let dec_shapes: Vec<Vec<usize>> =
            trace.dec.iter().map(|&v| cx.tape.value(v).shape().to_vec()).collect();
        assert_eq!(
            dec_shapes,
            vec![
                vec![1, 8, 8, c[3]],
                vec![1, 16, 16, c[2]],
                vec![1, 32, 32, c[1]],
                vec![1, 64, 64, c[0]],
            ]
        );
        let y = cx.tape.value(trace.y_hat);
        assert_eq!(y.shape(), &[1, 64, 64, 1]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn wiring_holds_for_other_extents_and_rejects_bad_ones() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(12);
        let net = DcNet::new(&mut store, &mut rng, "net", small_opts()).unwrap();
        let mut data_rng = Rng64::new(61);

        for extent in [16usize, 48] {
            let img = rng_tensor(&mut data_rng, &[2, extent, extent, 1]);
            let mut cx = Cx::new(&mut store, Phase::Eval);
            let v = cx.tape.leaf(img, false).unwrap();
            let trace = net.forward(&mut cx, v).unwrap();
            assert_eq!(cx.tape.value(trace.y_hat).shape(), &[2, extent, extent, 1]);
        }

        let img = rng_tensor(&mut data_rng, &[1, 24, 24, 1]);
        let mut cx = Cx::new(&mut store, Phase::Eval);
        let v = cx.tape.leaf(img, false).unwrap();
        assert!(net.forward(&mut cx, v).is_err());

        let img = rng_tensor(&mut data_rng, &[1, 16, 16, 3]);
        let mut cx = Cx::new(&mut store, Phase::Eval);
        let v = cx.tape.leaf(img, false).unwrap();
        assert!(net.forward(&mut cx, v).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(13);
        let net = DcNet::new(&mut store, &mut rng, "net", small_opts()).unwrap();
        let mut data_rng = Rng64::new(62);
        let img = rng_tensor(&mut data_rng, &[1, 16, 16, 1]);

        let run = |store: &mut ParamStore| -> Vec<u64> {
            let mut cx = Cx::new(store, Phase::Eval);
            let v = cx.tape.leaf(img.clone(), false).unwrap();
            let t = net.forward(&mut cx, v).unwrap();
            cx.tape.value(t.y_hat).data().iter().map(|v| v.to_bits()).collect()
        };
        let a = run(&mut store);
        let b = run(&mut store);
        assert_eq!(a, b);
    }

    #[test]
    fn variants_build_and_share_structure_names() {
        let mut data_rng = Rng64::new(63);
        let img = rng_tensor(&mut data_rng, &[1, 16, 16, 1]);
        for (pooling, fusion, coupler) in [
            (PoolKind::Max, FusionKind::Ccf, CouplerKind::Dar),
            (PoolKind::Dcp, FusionKind::Concat, CouplerKind::Dar),
            (PoolKind::Dcp, FusionKind::Ccf, CouplerKind::Concat),
            (PoolKind::Dcp, FusionKind::Ccf, CouplerKind::None),
        ] {
            let mut store = ParamStore::new();
            let mut rng = init_rng(14);
            let opts = NetOptions { pooling, fusion, coupler, ..small_opts() };
            let net = DcNet::new(&mut store, &mut rng, "net", opts).unwrap();
            let mut cx = Cx::new(&mut store, Phase::Eval);
            let v = cx.tape.leaf(img.clone(), false).unwrap();
            let trace = net.forward(&mut cx, v).unwrap();
            let y = cx.tape.value(trace.y_hat);
            assert_eq!(y.shape(), &[1, 16, 16, 1]);
            assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
            if coupler == CouplerKind::None {
                assert!(trace.agg.is_empty());
                assert!(trace.aux.is_none());
            }
        }

        // Max pooling removes exactly the pooling parameters.
        let mut full_store = ParamStore::new();
        let mut rng = init_rng(14);
        DcNet::new(&mut full_store, &mut rng, "net", small_opts()).unwrap();
        let mut maxp_store = ParamStore::new();
        let mut rng = init_rng(14);
        DcNet::new(
            &mut maxp_store,
            &mut rng,
            "net",
            NetOptions { pooling: PoolKind::Max, ..small_opts() },
        )
        .unwrap();
        let full_names: std::collections::BTreeSet<String> =
            full_store.indices().map(|i| full_store.name(i).to_string()).collect();
        let maxp_names: std::collections::BTreeSet<String> =
            maxp_store.indices().map(|i| maxp_store.name(i).to_string()).collect();
        assert!(maxp_names.is_subset(&full_names));
        let removed: Vec<&String> = full_names.difference(&maxp_names).collect();
        assert_eq!(removed.len(), 8, "four pools × (w, b): {removed:?}");
        assert!(removed.iter().all(|n| n.contains(".pool")));
    }

    #[test]
    fn zeroed_projections_equal_concat_coupling_exactly() {
        // Build the full model, drift its statistics with a train-phase
        // pass, zero every coupler projection, and compare against the
        // pure-concatenation variant carrying the same surviving
        // parameters: the graphs must agree bitwise in both phases.
        let mut full_store = ParamStore::new();
        let mut rng = init_rng(15);
        let full = DcNet::new(&mut full_store, &mut rng, "net", small_opts()).unwrap();

        let mut data_rng = Rng64::new(64);
        let img = rng_tensor(&mut data_rng, &[2, 16, 16, 1]);
        {
            let mut cx = Cx::new(&mut full_store, Phase::Train);
            let v = cx.tape.leaf(img.clone(), false).unwrap();
            full.forward(&mut cx, v).unwrap();
        }
        full.zero_dar_projections(&mut full_store);

        let mut concat_store = ParamStore::new();
        let mut rng = init_rng(99);
        let concat = DcNet::new(
            &mut concat_store,
            &mut rng,
            "net",
            NetOptions { coupler: CouplerKind::Concat, ..small_opts() },
        )
        .unwrap();
        for idx in concat_store.indices().collect::<Vec<_>>() {
            let name = concat_store.name(idx).to_string();
            let src = full_store.find(&name).unwrap_or_else(|| panic!("{name} missing in full"));
            *concat_store.value_mut(idx) = full_store.value(src).clone();
        }

        for phase in [Phase::Eval, Phase::Train] {
            let mut cx = Cx::frozen(&mut full_store, phase);
            let v = cx.tape.leaf(img.clone(), false).unwrap();
            let trace = full.forward(&mut cx, v).unwrap();
            let y_full = cx.tape.value(trace.y_hat).clone();

            let mut cx = Cx::frozen(&mut concat_store, phase);
            let v = cx.tape.leaf(img.clone(), false).unwrap();
            let trace = concat.forward(&mut cx, v).unwrap();
            let y_concat = cx.tape.value(trace.y_hat).clone();

            for (a, b) in y_full.data().iter().zip(y_concat.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "phase {phase:?}");
            }
        }
    }

    #[test]
    fn every_weight_receives_gradient() {
        // 32×32 keeps the deepest plane at 2×2: at 16×16 it degenerates
        // to 1×1, where batch normalization over two samples emits
        // exactly ±γ + β whatever the weights are, and the convolutions
        // feeding it legitimately receive a zero gradient.
        let mut store = ParamStore::new();
        let mut rng = init_rng(16);
        let net = DcNet::new(&mut store, &mut rng, "net", small_opts()).unwrap();
        let mut data_rng = Rng64::new(65);
        randomize_betas(&mut store, &mut data_rng);
        let img = rng_tensor(&mut data_rng, &[2, 32, 32, 1]);
        let y: Tensor = Tensor::from_vec(
            &[2, 32, 32, 1],
            (0..2048).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect(),
        );

        let mut cx = Cx::new(&mut store, Phase::Train);
        let v = cx.tape.leaf(img, false).unwrap();
        let trace = net.forward(&mut cx, v).unwrap();
        let cfg = crate::loss::LossConfig::default();
        let (loss, _) =
            crate::loss::total_loss_graph(&mut cx.tape, trace.s_f, trace.s_b, trace.y_hat, &y, &cfg)
                .unwrap();
        cx.tape.backward(loss).unwrap();
        cx.collect_grads();

        for idx in store.indices() {
            if store.kind(idx) != ParamKind::Weight {
                continue;
            }
            let name = store.name(idx);
            let grad = store.grad(idx);
            let has = grad.map(|g| g.data().iter().any(|&v| v != 0.0)).unwrap_or(false);
            assert!(has, "no gradient reached {name}");
        }
    }

    #[test]
    fn summary_counts_match_shape_arithmetic() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(17);
        let net = DcNet::new(&mut store, &mut rng, "net", small_opts()).unwrap();
        let summary = model_summary(&store, "net", &net, 64);

        assert_eq!(
            summary.total_weights,
            store.numel_of_kind(ParamKind::Weight),
            "per-module weights must partition the total"
        );
        let module_sum: usize = summary.modules.iter().map(|m| m.weights).sum();
        assert_eq!(module_sum, summary.total_weights);

        // Independent shape arithmetic for selected modules, at the
        // scaled table [4, 8, 16, 32, 64].
        let unit = |k: usize, cin: usize, cout: usize| k * k * cin * cout + 2 * cout;
        let by_name = |needle: &str| {
            summary
                .modules
                .iter()
                .find(|m| m.module == needle)
                .unwrap_or_else(|| panic!("module {needle} missing"))
                .weights
        };
        assert_eq!(by_name("enc1"), unit(3, 2, 4));
        assert_eq!(by_name("enc2"), unit(3, 8, 8));
        assert_eq!(by_name("pool1"), 2 * 2 * 4 * 4 + 4 * 4);
        assert_eq!(by_name("head"), 2 * 4 * 1 + 1);
        assert_eq!(by_name("fuse1"), 32 + 32 + unit(3, 64, 32));
        // Aggregation unit 1 at c = 4: fg 1×1, bg 3×3, coupler (two
        // pyramid branches of three dilated units + squeeze linear,
        // plus the 1×1 doubling projection).
        let pyramid = 3 * unit(3, 4, 4) + (12 * 4 + 4);
        assert_eq!(by_name("agg1"), unit(1, 4, 4) + unit(3, 4, 4) + 2 * pyramid + unit(1, 4, 8));

        // MAC estimate scales like the parameter count: quadrupling
        // width roughly quadruples both.
        let mut store2 = ParamStore::new();
        let mut rng2 = init_rng(17);
        let net2 = DcNet::new(
            &mut store2,
            &mut rng2,
            "net",
            NetOptions { width: 0.25, ..NetOptions::default() },
        )
        .unwrap();
        let summary2 = model_summary(&store2, "net", &net2, 64);
        let ratio = summary2.total_weights as f64 / summary.total_weights as f64;
        assert!((3.2..4.2).contains(&ratio), "weight ratio {ratio}");
        let mac_ratio = summary2.macs as f64 / summary.macs as f64;
        assert!((3.2..4.2).contains(&mac_ratio), "mac ratio {mac_ratio}");
    }
}
