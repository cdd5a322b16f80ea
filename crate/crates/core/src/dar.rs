//! Dependency-aware recoupling (DaR) of foreground and background features.
//!
//! The coupler treats the *reversed* background feature as evidence for
//! the foreground. It distills the reversed map into two global
//! prototype vectors through parallel dilated-convolution pyramids:
//!
//! * each pyramid applies three 3×3 convolution units with dilations
//!   1, 3 and 5, concatenates the three responses (3c channels), pools
//!   them globally, and projects back to c channels with a bare affine
//!   layer — producing the key prototype K from one branch and the
//!   value prototype V from the other;
//! * every foreground pixel attends to the key: `a_p = ψ(⟨F_p, K⟩)`,
//!   a scalar gate in (0,1) per pixel;
//! * the gated value `F̃_p = a_p · V` is projected to 2c channels by a
//!   1×1 convolution unit and added to the plain concatenation
//!   `F^f ⊕ F̃^b`, so the attention path refines — never replaces — the
//!   residual fusion.
//!
//! [`AggregationUnit`] wraps the coupler with the two stream embeddings
//! used at every encoder/decoder stage, and [`AuxiliaryStream`] is the
//! background U-shaped companion network whose stage features feed the
//! background side of those units.

use rand_chacha::ChaCha8Rng;

use crate::layers::{ConvUnit, Cx, Linear, ParamStore};
use crate::ops::ConvSpec;
use crate::tape::Var;
use crate::{Error, Result};

/// One prototype pyramid: three dilated 3×3 convolution units whose
/// concatenated responses are globally pooled and projected to c.
pub struct PyramidBranch {
    pub d1: ConvUnit,
    pub d3: ConvUnit,
    pub d5: ConvUnit,
    pub proj: Linear,
    pub channels: usize,
}

impl PyramidBranch {
    /// `cyclic` switches the three convolutions to wrap-around padding,
    /// which makes the branch exactly shift-invariant (used in tests).
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        cyclic: bool,
    ) -> Self {
        let spec = |d: usize| {
            let s = ConvSpec::same(3, d);
            if cyclic {
                s.into_cyclic()
            } else {
                s
            }
        };
        let d1 = ConvUnit::new(store, rng, &format!("{name}.d1"), channels, channels, spec(1));
        let d3 = ConvUnit::new(store, rng, &format!("{name}.d3"), channels, channels, spec(3));
        let d5 = ConvUnit::new(store, rng, &format!("{name}.d5"), channels, channels, spec(5));
        let proj = Linear::new(store, rng, &format!("{name}.proj"), 3 * channels, channels, true);
        PyramidBranch { d1, d3, d5, proj, channels }
    }

    /// `[n, h, w, c]` → prototype `[n, c]`.
    pub fn forward(&self, cx: &mut Cx, x: Var) -> Result<Var> {
        let a = self.d1.forward(cx, x)?;
        let b = self.d3.forward(cx, x)?;
        let c = self.d5.forward(cx, x)?;
        let cat = cx.tape.concat(&[a, b, c])?;
        let gap = cx.tape.global_avg_pool(cat)?;
        self.proj.forward(cx, gap)
    }
}

/// The pair of independent pyramids producing the key and value
/// prototypes from the reversed background feature.
pub struct PrototypeExtractor {
    pub k_branch: PyramidBranch,
    pub v_branch: PyramidBranch,
}

impl PrototypeExtractor {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        PrototypeExtractor {
            k_branch: PyramidBranch::new(store, rng, &format!("{name}.k"), channels, false),
            v_branch: PyramidBranch::new(store, rng, &format!("{name}.v"), channels, false),
        }
    }

    pub fn forward(&self, cx: &mut Cx, x: Var) -> Result<(Var, Var)> {
        Ok((self.k_branch.forward(cx, x)?, self.v_branch.forward(cx, x)?))
    }
}

/// Pixel-wise scalar attention: every pixel of `f` is gated by its
/// affinity with the key and emits the gated value.
///
/// `f`: `[n, h, w, c]`; `k`, `v`: `[n, c]` → `[n, h, w, c]`.
pub fn dependency_attend(cx: &mut Cx, f: Var, k: Var, v: Var) -> Result<Var> {
    Ok(dependency_attend_with_map(cx, f, k, v)?.0)
}

/// [`dependency_attend`] that also returns the per-pixel gate `a` as a
/// `[n, h, w, 1]` map in (0, 1) — the quantity the `dar-attn` command
/// renders as an image.
pub fn dependency_attend_with_map(cx: &mut Cx, f: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (n, h, w, c) = cx.tape.value(f).dims4("dependency_attend")?;
    for (name, var) in [("key", k), ("value", v)] {
        if cx.tape.value(var).shape() != [n, c] {
            return Err(Error::shape(
                "dependency_attend",
                format!(
                    "{name} shape {:?} does not match feature [{n}, {c}]",
                    cx.tape.value(var).shape()
                ),
            ));
        }
    }
    let f_flat = cx.tape.reshape(f, &[n, h * w, c])?;
    let k3 = cx.tape.reshape(k, &[n, c, 1])?;
    let scores = cx.tape.bmm(f_flat, k3, false, false)?;
    let a = cx.tape.sigmoid(scores);
    let v3 = cx.tape.reshape(v, &[n, 1, c])?;
    let gated = cx.tape.bmm(a, v3, false, false)?;
    let out = cx.tape.reshape(gated, &[n, h, w, c])?;
    let a_map = cx.tape.reshape(a, &[n, h, w, 1])?;
    Ok((out, a_map))
}

/// The full coupler: reversal, prototype extraction, attention, 1×1
/// projection to 2c, and the residual concatenation.
pub struct DarCoupler {
    pub proto: PrototypeExtractor,
    pub proj: ConvUnit,
    pub channels: usize,
}

impl DarCoupler {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        let proto = PrototypeExtractor::new(store, rng, &format!("{name}.proto"), channels);
        let proj = ConvUnit::new(
            store,
            rng,
            &format!("{name}.proj"),
            channels,
            2 * channels,
            ConvSpec::same(1, 1),
        );
        DarCoupler { proto, proj, channels }
    }

    /// `f_f`, `f_b`: `[n, h, w, c]` → `[n, h, w, 2c]`.
    pub fn forward(&self, cx: &mut Cx, f_f: Var, f_b: Var) -> Result<Var> {
        Ok(self.forward_with_attention(cx, f_f, f_b)?.0)
    }

    /// [`DarCoupler::forward`] that also returns the attention map
    /// (`[n, h, w, 1]`).
    pub fn forward_with_attention(&self, cx: &mut Cx, f_f: Var, f_b: Var) -> Result<(Var, Var)> {
        let shape_f = cx.tape.value(f_f).shape().to_vec();
        let shape_b = cx.tape.value(f_b).shape().to_vec();
        if shape_f != shape_b {
            return Err(Error::shape(
                "dar",
                format!("stream shapes {shape_f:?} vs {shape_b:?} must match"),
            ));
        }
        let (_, _, _, c) = cx.tape.value(f_f).dims4("dar")?;
        if c != self.channels {
            return Err(Error::shape(
                "dar",
                format!("channel count {c} does not match configured {}", self.channels),
            ));
        }
        let f_b_rev = cx.tape.self_reversal(f_b)?;
        let (k, v) = self.proto.forward(cx, f_b_rev)?;
        let (f_tilde, a_map) = dependency_attend_with_map(cx, f_f, k, v)?;
        let projected = self.proj.forward(cx, f_tilde)?;
        let residual = cx.tape.concat(&[f_f, f_b_rev])?;
        Ok((cx.tape.add(projected, residual)?, a_map))
    }

    /// Silence the attention path so the coupler reduces to the plain
    /// residual concatenation in *both* phases. Zeroing the convolution
    /// weight alone is not enough: in evaluation mode the normalization
    /// of a zero map is `(0 − running_mean)·inv_std`, which is nonzero
    /// once statistics have drifted — zeroing the scale γ (and the
    /// shift β) kills the path regardless of the stored statistics.
    pub fn zero_projection(&self, store: &mut ParamStore) {
        for idx in [self.proj.conv.w, self.proj.bn.gamma, self.proj.bn.beta] {
            for v in store.value_mut(idx).data_mut() {
                *v = 0.0;
            }
        }
    }
}

/// Stage-level fusion: embed both streams to the foreground's channel
/// count (1×1 unit for the foreground, 3×3 unit for the background) and
/// recouple them, doubling the channel count.
pub struct AggregationUnit {
    pub fg: ConvUnit,
    pub bg: ConvUnit,
    pub dar: DarCoupler,
}

impl AggregationUnit {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fg_channels: usize,
        bg_channels: usize,
    ) -> Self {
        let c = fg_channels;
        let fg = ConvUnit::new(store, rng, &format!("{name}.fg"), fg_channels, c, ConvSpec::same(1, 1));
        let bg = ConvUnit::new(store, rng, &format!("{name}.bg"), bg_channels, c, ConvSpec::same(3, 1));
        let dar = DarCoupler::new(store, rng, &format!("{name}.dar"), c);
        AggregationUnit { fg, bg, dar }
    }

    /// `x_f`: `[n, h, w, c_f]`, `x_b`: `[n, h, w, c_b]` → `[n, h, w, 2c_f]`.
    pub fn forward(&self, cx: &mut Cx, x_f: Var, x_b: Var) -> Result<Var> {
        Ok(self.forward_with_attention(cx, x_f, x_b)?.0)
    }

    /// [`AggregationUnit::forward`] that also returns the coupler's
    /// attention map (`[n, h, w, 1]`).
    pub fn forward_with_attention(&self, cx: &mut Cx, x_f: Var, x_b: Var) -> Result<(Var, Var)> {
        let ef = self.fg.forward(cx, x_f)?;
        let eb = self.bg.forward(cx, x_b)?;
        self.dar.forward_with_attention(cx, ef, eb)
    }
}

/// Features recorded by one auxiliary-stream pass.
pub struct AuxTrace {
    /// Pre-pool convolution activations of the five contracting blocks.
    pub acts: Vec<Var>,
    /// Post-pool outputs of contracting blocks 1–4.
    pub pooled: Vec<Var>,
    /// Outputs of the four expanding blocks, shallowest last.
    pub dec: Vec<Var>,
}

/// The background companion network: a compact U-shaped stream whose
/// stage features pair with the main network's stages. Five contracting
/// blocks (3×3 unit then 2×2 max-pool; the deepest block is unpooled)
/// and four expanding blocks (×2 upsample, skip concatenation with the
/// matching pre-pool activation, 3×3 unit).
pub struct AuxiliaryStream {
    pub enc: Vec<ConvUnit>,
    pub dec: Vec<ConvUnit>,
    pub channels: Vec<usize>,
}

impl AuxiliaryStream {
    /// `channels` lists the five contracting widths, shallow to deep.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        channels: &[usize],
    ) -> Self {
        assert_eq!(channels.len(), 5, "auxiliary stream takes five stage widths");
        let mut enc = Vec::with_capacity(5);
        let mut prev = cin;
        for (j, &c) in channels.iter().enumerate() {
            enc.push(ConvUnit::new(
                store,
                rng,
                &format!("{name}.enc{}", j + 1),
                prev,
                c,
                ConvSpec::same(3, 1),
            ));
            prev = c;
        }
        let mut dec = Vec::with_capacity(4);
        for j in 1..=4 {
            let cin_dec = channels[5 - j] + channels[4 - j];
            dec.push(ConvUnit::new(
                store,
                rng,
                &format!("{name}.dec{j}"),
                cin_dec,
                channels[4 - j],
                ConvSpec::same(3, 1),
            ));
        }
        AuxiliaryStream { enc, dec, channels: channels.to_vec() }
    }

    /// `x`: `[n, h, w, cin]` with h, w divisible by 16.
    pub fn forward(&self, cx: &mut Cx, x: Var) -> Result<AuxTrace> {
        let (_, h, w, _) = cx.tape.value(x).dims4("auxiliary_stream")?;
        crate::layers::check_extent("auxiliary_stream", h, 16)?;
        crate::layers::check_extent("auxiliary_stream", w, 16)?;
        let mut acts = Vec::with_capacity(5);
        let mut pooled = Vec::with_capacity(4);
        let mut cur = x;
        for (j, unit) in self.enc.iter().enumerate() {
            let act = unit.forward(cx, cur)?;
            acts.push(act);
            if j < 4 {
                let p = cx.tape.max_pool(act, 2)?;
                pooled.push(p);
                cur = p;
            }
        }
        let mut dec = Vec::with_capacity(4);
        let mut prev = acts[4];
        for (j, unit) in self.dec.iter().enumerate() {
            let up = cx.tape.upsample(prev, 2)?;
            let cat = cx.tape.concat(&[up, acts[3 - j]])?;
            let out = unit.forward(cx, cat)?;
            dec.push(out);
            prev = out;
        }
        Ok(AuxTrace { acts, pooled, dec })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, GradcheckCfg};
    use crate::layers::{init_rng, Phase, BN_EPS};
    use crate::ops;
    use crate::tensor::Tensor;
    use crate::testutil::{assert_close, rng_tensor, Rng64};

    #[test]
    fn dependency_attend_matches_hand_oracle() {
        let mut store = ParamStore::new();
        let mut cx = Cx::new(&mut store, Phase::Train);
        let mut rng = Rng64::new(50);
        let ft = rng_tensor(&mut rng, &[1, 2, 2, 2]);
        let kt = rng_tensor(&mut rng, &[1, 2]);
        let vt = rng_tensor(&mut rng, &[1, 2]);
        let f = cx.tape.leaf(ft.clone(), false).unwrap();
        let k = cx.tape.leaf(kt.clone(), false).unwrap();
        let v = cx.tape.leaf(vt.clone(), false).unwrap();
        let out = dependency_attend(&mut cx, f, k, v).unwrap();
        assert_eq!(cx.tape.value(out).shape(), [1, 2, 2, 2]);
        for pix in 0..4 {
            let score: f64 = (0..2).map(|c| ft.data()[pix * 2 + c] * kt.data()[c]).sum();
            let a = 1.0 / (1.0 + (-score).exp());
            for c in 0..2 {
                assert_close(cx.tape.value(out).data()[pix * 2 + c], a * vt.data()[c], 1e-12);
            }
        }
    }

    #[test]
    fn zero_key_gates_at_one_half_and_zero_value_gives_zero() {
        let mut store = ParamStore::new();
        let mut cx = Cx::new(&mut store, Phase::Train);
        let mut rng = Rng64::new(51);
        let ft = rng_tensor(&mut rng, &[1, 2, 2, 3]);
        let vt = rng_tensor(&mut rng, &[1, 3]);
        let f = cx.tape.leaf(ft, false).unwrap();
        let k0 = cx.tape.leaf(Tensor::zeros(&[1, 3]), false).unwrap();
        let v = cx.tape.leaf(vt.clone(), false).unwrap();
        let out = dependency_attend(&mut cx, f, k0, v).unwrap();
        for pix in 0..4 {
            for c in 0..3 {
                // ψ(0) = 1/2 exactly, and 0.5 · v is exact in f64.
                assert_eq!(cx.tape.value(out).data()[pix * 3 + c], 0.5 * vt.data()[c]);
            }
        }
        let v0 = cx.tape.leaf(Tensor::zeros(&[1, 3]), false).unwrap();
        let k = cx.tape.leaf(rng_tensor(&mut rng, &[1, 3]), false).unwrap();
        let out0 = dependency_attend(&mut cx, f, k, v0).unwrap();
        assert!(cx.tape.value(out0).data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn prototypes_have_channel_shape() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(52);
        let proto = PrototypeExtractor::new(&mut store, &mut rng, "p", 3);
        let mut cx = Cx::new(&mut store, Phase::Train);
        let mut data_rng = Rng64::new(52);
        let x = cx.tape.leaf(rng_tensor(&mut data_rng, &[2, 4, 4, 3]), false).unwrap();
        let (k, v) = proto.forward(&mut cx, x).unwrap();
        assert_eq!(cx.tape.value(k).shape(), [2, 3]);
        assert_eq!(cx.tape.value(v).shape(), [2, 3]);
    }

    /// Fill a parameter with small integers from a deterministic pattern.
    fn fill_ints(store: &mut ParamStore, idx: crate::layers::PIdx, modulus: i64, shift: i64) {
        for (i, v) in store.value_mut(idx).data_mut().iter_mut().enumerate() {
            *v = ((i as i64 * 7 + 3) % modulus - shift) as f64;
        }
    }

    #[test]
    fn cyclic_pyramid_prototypes_are_exactly_translation_invariant() {
        // Integer weights and inputs keep every convolution, pooling sum
        // and projection exact in f64, so a cyclic shift of the input
        // permutes intermediate values without any rounding: the pooled
        // prototypes must match bit for bit. Batch normalization runs in
        // evaluation mode with statistics chosen so the affine step is
        // the exact identity.
        let mut store = ParamStore::new();
        let mut rng = init_rng(53);
        let pb = PyramidBranch::new(&mut store, &mut rng, "pb", 3, true);

        for unit in [&pb.d1, &pb.d3, &pb.d5] {
            fill_ints(&mut store, unit.conv.w, 5, 2);
            // γ = 1, β = 0, mean = 0 are the defaults; pick a running
            // variance whose sum with ε is exactly 1.0.
            let mut v = 1.0 - BN_EPS;
            while v + BN_EPS != 1.0 {
                v = f64::from_bits(v.to_bits() + 1);
            }
            assert_eq!(v + BN_EPS, 1.0);
            for slot in store.value_mut(unit.bn.rvar).data_mut() {
                *slot = v;
            }
        }
        fill_ints(&mut store, pb.proj.w, 5, 2);

        let mut x = Tensor::zeros(&[1, 8, 8, 3]);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = ((i * 11 + 5) % 5) as f64;
        }
        let (dy, dx) = (3usize, 5usize);
        let mut shifted = Tensor::zeros(&[1, 8, 8, 3]);
        for y in 0..8 {
            for xx in 0..8 {
                for c in 0..3 {
                    let src = (((y + dy) % 8) * 8 + (xx + dx) % 8) * 3 + c;
                    shifted.data_mut()[(y * 8 + xx) * 3 + c] = x.data()[src];
                }
            }
        }

        let run = |store: &mut ParamStore, input: Tensor| -> Vec<f64> {
            let mut cx = Cx::new(store, Phase::Eval);
            let leaf = cx.tape.leaf(input, false).unwrap();
            let k = pb.forward(&mut cx, leaf).unwrap();
            cx.tape.value(k).data().to_vec()
        };
        let base = run(&mut store, x);
        let moved = run(&mut store, shifted);
        assert_eq!(base, moved, "cyclic shift must leave the prototype bitwise unchanged");
    }

    #[test]
    fn zeroed_projection_reduces_to_concat_fusion_in_both_phases() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(54);
        let dar = DarCoupler::new(&mut store, &mut rng, "dar", 2);
        let mut data_rng = Rng64::new(54);

        // Let the running statistics drift away from their initial
        // values so the evaluation phase is a real test.
        {
            let mut cx = Cx::new(&mut store, Phase::Train);
            let f = cx.tape.leaf(rng_tensor(&mut data_rng, &[1, 4, 4, 2]), false).unwrap();
            let b = cx.tape.leaf(rng_tensor(&mut data_rng, &[1, 4, 4, 2]), false).unwrap();
            dar.forward(&mut cx, f, b).unwrap();
        }
        dar.zero_projection(&mut store);

        let ft = rng_tensor(&mut data_rng, &[1, 4, 4, 2]);
        let bt = rng_tensor(&mut data_rng, &[1, 4, 4, 2]);
        let (rev, _) = ops::self_reversal_forward(&bt).unwrap();
        let mut expected = Vec::new();
        for pix in 0..16 {
            expected.extend_from_slice(&ft.data()[pix * 2..pix * 2 + 2]);
            expected.extend_from_slice(&rev.data()[pix * 2..pix * 2 + 2]);
        }

        for phase in [Phase::Train, Phase::Eval] {
            let mut cx = Cx::new(&mut store, phase);
            let f = cx.tape.leaf(ft.clone(), false).unwrap();
            let b = cx.tape.leaf(bt.clone(), false).unwrap();
            let out = dar.forward(&mut cx, f, b).unwrap();
            assert_eq!(cx.tape.value(out).shape(), [1, 4, 4, 4]);
            assert_eq!(cx.tape.value(out).data(), &expected[..], "phase {phase:?}");
        }
    }

    #[test]
    fn coupler_rejects_mismatched_streams() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(55);
        let dar = DarCoupler::new(&mut store, &mut rng, "dar", 2);
        let mut cx = Cx::new(&mut store, Phase::Train);
        let f = cx.tape.leaf(Tensor::zeros(&[1, 4, 4, 2]), false).unwrap();
        let b = cx.tape.leaf(Tensor::zeros(&[1, 2, 2, 2]), false).unwrap();
        assert!(dar.forward(&mut cx, f, b).is_err());
        let b3 = cx.tape.leaf(Tensor::zeros(&[1, 4, 4, 3]), false).unwrap();
        assert!(dar.forward(&mut cx, f, b3).is_err());
    }

    #[test]
    fn coupler_gradcheck_passes() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(56);
        let dar = DarCoupler::new(&mut store, &mut rng, "dar", 2);
        let mut data_rng = Rng64::new(56);
        let ff = rng_tensor(&mut data_rng, &[1, 3, 3, 2]);
        let fb = rng_tensor(&mut data_rng, &[1, 3, 3, 2]);
        let cfg = GradcheckCfg { max_coords: 300, ..GradcheckCfg::default() };
        let report = gradcheck(
            &mut store,
            &[ff, fb],
            |cx, v| {
                let out = dar.forward(cx, v[0], v[1])?;
                let sq = cx.tape.mul(out, out)?;
                Ok(cx.tape.sum(sq))
            },
            &cfg,
        )
        .unwrap();
        assert!(report.pass(), "worst: {}", report.worst);
    }

    #[test]
    fn aggregation_unit_doubles_foreground_channels() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(57);
        let agg = AggregationUnit::new(&mut store, &mut rng, "agg", 3, 5);
        let mut cx = Cx::new(&mut store, Phase::Train);
        let mut data_rng = Rng64::new(57);
        let xf = cx.tape.leaf(rng_tensor(&mut data_rng, &[2, 4, 4, 3]), false).unwrap();
        let xb = cx.tape.leaf(rng_tensor(&mut data_rng, &[2, 4, 4, 5]), false).unwrap();
        let out = agg.forward(&mut cx, xf, xb).unwrap();
        assert_eq!(cx.tape.value(out).shape(), [2, 4, 4, 6]);
    }

    #[test]
    fn aggregation_unit_gradcheck_passes() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(58);
        let agg = AggregationUnit::new(&mut store, &mut rng, "agg", 2, 3);
        let mut data_rng = Rng64::new(58);
        let xf = rng_tensor(&mut data_rng, &[1, 3, 3, 2]);
        let xb = rng_tensor(&mut data_rng, &[1, 3, 3, 3]);
        let cfg = GradcheckCfg { max_coords: 300, ..GradcheckCfg::default() };
        let report = gradcheck(
            &mut store,
            &[xf, xb],
            |cx, v| {
                let out = agg.forward(cx, v[0], v[1])?;
                let sq = cx.tape.mul(out, out)?;
                Ok(cx.tape.sum(sq))
            },
            &cfg,
        )
        .unwrap();
        assert!(report.pass(), "worst: {}", report.worst);
    }

    #[test]
    fn auxiliary_stream_walks_the_expected_extents() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(59);
        let aux = AuxiliaryStream::new(&mut store, &mut rng, "aux", 2, &[4, 5, 6, 7, 8]);
        let mut cx = Cx::new(&mut store, Phase::Train);
        let mut data_rng = Rng64::new(59);
        let x = cx.tape.leaf(rng_tensor(&mut data_rng, &[1, 16, 16, 2]), false).unwrap();
        let trace = aux.forward(&mut cx, x).unwrap();

        let act_shapes: Vec<_> =
            trace.acts.iter().map(|v| cx.tape.value(*v).shape().to_vec()).collect();
        assert_eq!(
            act_shapes,
            vec![
                vec![1, 16, 16, 4],
                vec![1, 8, 8, 5],
                vec![1, 4, 4, 6],
                vec![1, 2, 2, 7],
                vec![1, 1, 1, 8],
            ]
        );
        let pooled_shapes: Vec<_> =
            trace.pooled.iter().map(|v| cx.tape.value(*v).shape().to_vec()).collect();
        assert_eq!(
            pooled_shapes,
            vec![vec![1, 8, 8, 4], vec![1, 4, 4, 5], vec![1, 2, 2, 6], vec![1, 1, 1, 7]]
        );
        let dec_shapes: Vec<_> =
            trace.dec.iter().map(|v| cx.tape.value(*v).shape().to_vec()).collect();
        assert_eq!(
            dec_shapes,
            vec![vec![1, 2, 2, 7], vec![1, 4, 4, 6], vec![1, 8, 8, 5], vec![1, 16, 16, 4]]
        );
    }

    #[test]
    fn auxiliary_stream_rejects_indivisible_extents() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(60);
        let aux = AuxiliaryStream::new(&mut store, &mut rng, "aux", 2, &[4, 4, 4, 4, 4]);
        let mut cx = Cx::new(&mut store, Phase::Train);
        for bad in [[1, 12, 16, 2], [1, 16, 8, 2]] {
            let x = cx.tape.leaf(Tensor::zeros(&bad), false).unwrap();
            assert!(aux.forward(&mut cx, x).is_err(), "extent {bad:?} must be rejected");
        }
    }

    #[test]
    fn auxiliary_stream_gradcheck_passes() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(61);
        let aux = AuxiliaryStream::new(&mut store, &mut rng, "aux", 2, &[4, 4, 4, 4, 4]);
        let mut data_rng = Rng64::new(61);
        let x = rng_tensor(&mut data_rng, &[1, 16, 16, 2]);
        // The deepest block normalizes a 1×1 plane, so its output is
        // exactly β; with β at its zero initialization the following
        // ReLU sits on its kink and central differences disagree with
        // the subgradient. Move β off zero to probe a smooth point.
        for unit in aux.enc.iter().chain(aux.dec.iter()) {
            let beta = unit.bn.beta;
            for v in store.value_mut(beta).data_mut() {
                *v = data_rng.uniform(0.25, 0.75);
            }
        }
        let cfg = GradcheckCfg { max_coords: 250, ..GradcheckCfg::default() };
        let report = gradcheck(
            &mut store,
            &[x],
            |cx, v| {
                let trace = aux.forward(cx, v[0])?;
                let last = trace.dec[3];
                let sq = cx.tape.mul(last, last)?;
                Ok(cx.tape.sum(sq))
            },
            &cfg,
        )
        .unwrap();
        assert!(report.pass(), "worst: {}", report.worst);
    }
}
