use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CodecConfig, CodecError, Variant};
use crate::masking::MaskPlan;
use crate::nncore::checkpoint::{load_checkpoint_into, save_checkpoint};
use crate::nncore::{Graph, NnError, NodeId, ParamId, ParamStore, QuantMode, Scalar, Tensor};
use crate::vision::ImageTensor;

pub const GROUP_CC_ENC: &str = "cc_enc";
pub const GROUP_CC_DEC: &str = "cc_dec";
const GROUP_META: &str = "meta";
const META_CC: &str = "meta.cc_active";
const LN_EPS: f64 = 1e-5;

/// Squash applied before quantization: `3·tanh(·)`.
pub const SQUASH: f64 = 3.0;

/// Levels back to the decoder's latent scale; no snapping.
pub fn dequantize(levels: &[f32]) -> Vec<f32> {
    levels.iter().map(|&v| v / SQUASH as f32).collect()
}

/// Parameter groups that make up each side, in the order they are built.
pub fn groups(variant: Variant) -> &'static [&'static str] {
    match variant {
        Variant::Vit => &["vit_enc", "compress_enc", GROUP_CC_ENC, GROUP_CC_DEC, "decompress_dec", "vit_dec"],
        Variant::CnnOnly => &["cnn_enc", GROUP_CC_ENC, GROUP_CC_DEC, "cnn_dec"],
    }
}

fn std_for(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

struct Init<'a> {
    s: &'a mut ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn linear(&mut self, group: &str, name: &str, i: usize, o: usize, scale: f64) {
        self.s.normal(&mut self.rng, group, &format!("{name}.w"), vec![i, o], std_for(i) * scale);
        self.s.constant(group, &format!("{name}.b"), vec![o], 0.0);
    }

    fn layer_norm(&mut self, group: &str, name: &str, n: usize) {
        self.s.constant(group, &format!("{name}.g"), vec![n], 1.0);
        self.s.constant(group, &format!("{name}.b"), vec![n], 0.0);
    }

    fn conv(&mut self, group: &str, name: &str, shape: [usize; 4], fan_in: usize, scale: f64, bias: f64) {
        self.s.normal(&mut self.rng, group, &format!("{name}.w"), shape.to_vec(), std_for(fan_in) * scale);
        let out = if name.contains("convt") { shape[1] } else { shape[0] };
        self.s.constant(group, &format!("{name}.b"), vec![out], bias);
    }

    /// Slot-mixing matrix: identity plus small noise.
    fn slot_mix(&mut self, group: &str, name: &str, n: usize) {
        let id = self.s.normal(&mut self.rng, group, name, vec![n, n], 0.02);
        let t = self.s.get_mut(id).data_mut();
        for k in 0..n {
            t[k * n + k] += 1.0;
        }
    }

    fn vit(&mut self, cfg: &CodecConfig, group: &str, side: &str) {
        let (d, m) = (cfg.embed_dim, cfg.mlp_dim);
        let resid = 1.0 / (2.0 * cfg.blocks.max(1) as f64).sqrt();
        self.s.normal(&mut self.rng, group, &format!("{side}.pos"), vec![cfg.n_patches(), d], 0.02);
        for b in 0..cfg.blocks {
            let p = format!("{side}.blk{b}");
            self.layer_norm(group, &format!("{p}.ln1"), d);
            self.linear(group, &format!("{p}.qkv"), d, 3 * d, 1.0);
            self.linear(group, &format!("{p}.proj"), d, d, resid);
            self.layer_norm(group, &format!("{p}.ln2"), d);
            self.linear(group, &format!("{p}.fc1"), d, m, 1.0);
            self.linear(group, &format!("{p}.fc2"), m, d, resid);
        }
        self.layer_norm(group, &format!("{side}.lnf"), d);
    }
}

fn init_params(cfg: &CodecConfig, seed: u64) -> ParamStore<f32> {
    let mut store = ParamStore::new();
    let mut it = Init { s: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
    let (d, l, hc) = (cfg.embed_dim, cfg.levels_per_patch(), cfg.compress_hidden);

    match cfg.variant {
        Variant::Vit => {
            it.linear("vit_enc", "enc.embed", cfg.patch_len(), d, 1.0);
            it.vit(cfg, "vit_enc", "enc");
            it.linear("compress_enc", "enc.comp1", d, hc, 1.0);
            it.linear("compress_enc", "enc.comp2", hc, l, 1.0);
        }
        Variant::CnnOnly => {
            let mut cin = cfg.channels;
            for (i, &w) in cfg.cnn_widths.iter().enumerate() {
                it.conv("cnn_enc", &format!("enc.conv{i}"), [w, cin, 4, 4], cin * 16, 1.0, 0.0);
                cin = w;
            }
            it.conv("cnn_enc", "enc.convz", [l, cin, 1, 1], cin, 1.0, 0.0);
        }
    }

    let (ch, n) = (cfg.cc_hidden, cfg.n_patches());
    for (side, group) in [("enc", GROUP_CC_ENC), ("dec", GROUP_CC_DEC)] {
        for i in 0..cfg.cc_layers {
            let cin = if i == 0 { l + 1 } else { ch };
            let last = i + 1 == cfg.cc_layers;
            let cout = if last { l } else { ch };
            it.slot_mix(group, &format!("{side}.cc{i}.s"), n);
            // The last layer starts near zero so the residual path begins close to identity.
            it.linear(group, &format!("{side}.cc{i}"), cin, cout, if last { 0.1 } else { 1.0 });
        }
    }

    match cfg.variant {
        Variant::Vit => {
            it.linear("decompress_dec", "dec.decomp1", l, hc, 1.0);
            it.linear("decompress_dec", "dec.decomp2", hc, d, 1.0);
            it.vit(cfg, "vit_dec", "dec");
            it.linear("vit_dec", "dec.head", d, cfg.patch_len(), 0.1);
            it.s.constant("vit_dec", "dec.head.b", vec![cfg.patch_len()], 0.5);
        }
        Variant::CnnOnly => {
            let widths = &cfg.cnn_widths;
            let top = *widths.last().expect("validated");
            it.conv("cnn_dec", "dec.convz", [top, l, 1, 1], l, 1.0, 0.0);
            for i in (0..widths.len()).rev() {
                let cin = widths[i];
                let cout = if i == 0 { cfg.channels } else { widths[i - 1] };
                let bias = if i == 0 { 0.5 } else { 0.0 };
                it.conv("cnn_dec", &format!("dec.convt{i}"), [cin, cout, 4, 4], cin * 4, 1.0, bias);
            }
        }
    }
    store.constant(GROUP_META, META_CC, vec![1], 0.0);
    store
}

fn pid<T: Scalar>(g: &Graph<T>, name: &str) -> Result<ParamId, NnError> {
    g.store().find(name).ok_or_else(|| NnError::Invalid(format!("missing parameter {name}")))
}

fn param<T: Scalar>(g: &mut Graph<T>, name: &str) -> Result<NodeId, NnError> {
    let id = pid(g, name)?;
    Ok(g.param(id))
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: NodeId, name: &str) -> Result<NodeId, NnError> {
    let (w, b) = (pid(g, &format!("{name}.w"))?, pid(g, &format!("{name}.b"))?);
    g.linear(x, w, b)
}

fn layer_norm<T: Scalar>(g: &mut Graph<T>, x: NodeId, name: &str) -> Result<NodeId, NnError> {
    let gamma = param(g, &format!("{name}.g"))?;
    let beta = param(g, &format!("{name}.b"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

fn conv<T: Scalar>(g: &mut Graph<T>, x: NodeId, name: &str, stride: usize, pad: usize) -> Result<NodeId, NnError> {
    let w = param(g, &format!("{name}.w"))?;
    let b = param(g, &format!("{name}.b"))?;
    g.conv2d(x, w, b, stride, pad)
}

fn conv_t<T: Scalar>(g: &mut Graph<T>, x: NodeId, name: &str, stride: usize, pad: usize) -> Result<NodeId, NnError> {
    let w = param(g, &format!("{name}.w"))?;
    let b = param(g, &format!("{name}.b"))?;
    g.conv_transpose2d(x, w, b, stride, pad)
}

/// Pre-norm transformer block with multi-head self-attention.
fn vit_block<T: Scalar>(g: &mut Graph<T>, x: NodeId, prefix: &str, cfg: &CodecConfig) -> Result<NodeId, NnError> {
    let (d, dh) = (cfg.embed_dim, cfg.head_dim());
    let h = layer_norm(g, x, &format!("{prefix}.ln1"))?;
    let qkv = linear(g, h, &format!("{prefix}.qkv"))?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let q = g.slice_cols(qkv, i * dh, dh)?;
        let k = g.slice_cols(qkv, d + i * dh, dh)?;
        let v = g.slice_cols(qkv, 2 * d + i * dh, dh)?;
        heads.push(g.attention(q, k, v)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let o = linear(g, cat, &format!("{prefix}.proj"))?;
    let x = g.add(x, o)?;
    let h = layer_norm(g, x, &format!("{prefix}.ln2"))?;
    let h = linear(g, h, &format!("{prefix}.fc1"))?;
    let h = g.gelu(h)?;
    let h = linear(g, h, &format!("{prefix}.fc2"))?;
    g.add(x, h)
}

fn vit_stack<T: Scalar>(g: &mut Graph<T>, mut x: NodeId, side: &str, cfg: &CodecConfig) -> Result<NodeId, NnError> {
    for b in 0..cfg.blocks {
        x = vit_block(g, x, &format!("{side}.blk{b}"), cfg)?;
    }
    layer_norm(g, x, &format!("{side}.lnf"))
}

/// `P` with `(X·P)[:, j] = X[:, order[j]]`.
fn order_perm<T: Scalar>(order: &[usize], transpose: bool) -> Tensor<T> {
    let n = order.len();
    let mut data = vec![T::zero(); n * n];
    for (j, &k) in order.iter().enumerate() {
        let (r, c) = if transpose { (j, k) } else { (k, j) };
        data[r * n + c] = T::one();
    }
    Tensor::new(vec![n, n], data).expect("square")
}

/// Fixed repetition routing in importance order. Kept slots occupy positions
/// `0..u`, masked slots `u..n`; masked position `j` carries a copy of kept
/// position `(j − u) mod u`. Returns `(I + R, A)` where `A` averages each
/// kept slot with its copies and leaves masked positions as they are.
fn repetition<T: Scalar>(plan: &MaskPlan) -> (Tensor<T>, Tensor<T>) {
    let n = plan.order.len();
    let u = plan.n_unmasked;
    let mut spread = vec![T::zero(); n * n];
    let mut avg = vec![T::zero(); n * n];
    let mut copies = vec![vec![]; n];
    for j in 0..n {
        spread[j * n + j] = T::one();
        if j >= u && u > 0 {
            let src = (j - u) % u;
            spread[j * n + src] = T::one();
            copies[src].push(j);
        }
    }
    for k in 0..n {
        if k < u {
            let w = T::from_f64(1.0 / (1 + copies[k].len()) as f64);
            avg[k * n + k] = w;
            for &j in &copies[k] {
                avg[k * n + j] = w;
            }
        } else {
            avg[k * n + k] = T::one();
        }
    }
    (Tensor::new(vec![n, n], spread).expect("square"), Tensor::new(vec![n, n], avg).expect("square"))
}

/// Channel-coding network on a latent `[L, rows, cols]`. Slots are put in
/// importance order, so kept slots always come first and masked slots last.
/// The encoder side first spreads copies of kept slots into masked ones and
/// the decoder side averages them back; on top of that fixed path, learned
/// layers mix across all slots (`S·X`) and then across channels, with the
/// kept/masked indicator as an extra input channel.
fn cc_net<T: Scalar>(g: &mut Graph<T>, z: NodeId, plan: &MaskPlan, side: &str, cfg: &CodecConfig) -> Result<NodeId, NnError> {
    let (l, n) = (cfg.levels_per_patch(), cfg.n_patches());
    let x = g.reshape(z, vec![l, n])?;
    let p = g.input(order_perm(&plan.order, false));
    let x = g.matmul(x, p)?;
    let x = g.transpose(x)?;
    let (spread, avg) = repetition(plan);
    let route = g.input(if side == "enc" { spread } else { avg });
    let base = g.matmul(route, x)?;
    let kept: Vec<T> = plan.order.iter().map(|&k| if plan.masked[k] { T::zero() } else { T::one() }).collect();
    let m = g.input(Tensor::new(vec![n, 1], kept)?);
    let mut x = g.concat_cols(&[base, m])?;
    for i in 0..cfg.cc_layers {
        let s = param(g, &format!("{side}.cc{i}.s"))?;
        x = g.matmul(s, x)?;
        x = linear(g, x, &format!("{side}.cc{i}"))?;
        if i + 1 < cfg.cc_layers {
            x = g.gelu(x)?;
        }
    }
    let x = g.add(base, x)?;
    let x = g.transpose(x)?;
    let pt = g.input(order_perm(&plan.order, true));
    let x = g.matmul(x, pt)?;
    g.reshape(x, vec![l, cfg.rows(), cfg.cols()])
}

/// `[L, rows, cols]` plane per latent channel, 1 for kept patches.
fn latent_mask<T: Scalar>(cfg: &CodecConfig, patch_mask: &[f32], planes: usize) -> Tensor<T> {
    let data = (0..planes).flat_map(|_| patch_mask.iter().map(|&m| T::from_f64(m as f64))).collect();
    Tensor::new(vec![planes, cfg.rows(), cfg.cols()], data).expect("mask shape")
}

fn hwc_to_chw<T: Scalar>(g: &mut Graph<T>, x: NodeId, cfg: &CodecConfig) -> Result<NodeId, NnError> {
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let x = g.reshape(x, vec![h * w, c])?;
    let x = g.transpose(x)?;
    g.reshape(x, vec![c, h, w])
}

fn chw_to_hwc<T: Scalar>(g: &mut Graph<T>, x: NodeId, cfg: &CodecConfig) -> Result<NodeId, NnError> {
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let x = g.reshape(x, vec![c, h * w])?;
    let x = g.transpose(x)?;
    g.reshape(x, vec![h, w, c])
}

/// How a forward pass treats the channel-coding CNNs and the quantizer.
#[derive(Clone, Copy, Debug)]
pub struct ForwardMode {
    pub use_cc: bool,
    pub quant: QuantMode,
}

/// Preprocessed image `[H,W,C]` → quantized levels `[L, rows, cols]`.
pub fn encode_graph<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &CodecConfig,
    img: NodeId,
    plan: &MaskPlan,
    mode: ForwardMode,
) -> Result<NodeId, NnError> {
    let l = cfg.levels_per_patch();
    let latent = match cfg.variant {
        Variant::Vit => {
            let x = g.patchify(img, cfg.patch)?;
            let x = linear(g, x, "enc.embed")?;
            let pos = param(g, "enc.pos")?;
            let x = g.add(x, pos)?;
            let x = vit_stack(g, x, "enc", cfg)?;
            let z = linear(g, x, "enc.comp1")?;
            let z = g.gelu(z)?;
            let z = linear(g, z, "enc.comp2")?;
            let z = g.transpose(z)?;
            g.reshape(z, vec![l, cfg.rows(), cfg.cols()])?
        }
        Variant::CnnOnly => {
            let mut x = hwc_to_chw(g, img, cfg)?;
            for i in 0..cfg.cnn_widths.len() {
                x = conv(g, x, &format!("enc.conv{i}"), 2, 1)?;
                x = g.gelu(x)?;
            }
            conv(g, x, "enc.convz", 1, 0)?
        }
    };
    debug_assert_eq!(g.shape(latent), [l, cfg.rows(), cfg.cols()]);
    let mask = g.input(latent_mask(cfg, &plan.patch_mask(), l));
    let z = g.mul(latent, mask)?;
    let y = if mode.use_cc {
        cc_net(g, z, plan, "enc", cfg)?
    } else {
        z
    };
    let y = g.tanh(y)?;
    let y = g.scale(y, SQUASH)?;
    g.quantize_ste(y, mode.quant)
}

/// Dequantized latent `[L, rows, cols]` → image `[H,W,C]` in [0,1].
pub fn decode_graph<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &CodecConfig,
    latent: NodeId,
    plan: &MaskPlan,
    use_cc: bool,
) -> Result<NodeId, NnError> {
    let (l, n) = (cfg.levels_per_patch(), cfg.n_patches());
    let y = if use_cc {
        cc_net(g, latent, plan, "dec", cfg)?
    } else {
        latent
    };
    let out = match cfg.variant {
        Variant::Vit => {
            let t = g.reshape(y, vec![l, n])?;
            let t = g.transpose(t)?;
            let t = linear(g, t, "dec.decomp1")?;
            let t = g.gelu(t)?;
            let t = linear(g, t, "dec.decomp2")?;
            let pos = param(g, "dec.pos")?;
            let t = g.add(t, pos)?;
            let t = vit_stack(g, t, "dec", cfg)?;
            let t = linear(g, t, "dec.head")?;
            g.unpatchify(t, cfg.height, cfg.width, cfg.channels, cfg.patch)?
        }
        Variant::CnnOnly => {
            let mut x = conv(g, y, "dec.convz", 1, 0)?;
            x = g.gelu(x)?;
            for i in (0..cfg.cnn_widths.len()).rev() {
                x = conv_t(g, x, &format!("dec.convt{i}"), 2, 1)?;
                if i > 0 {
                    x = g.gelu(x)?;
                }
            }
            chw_to_hwc(g, x, cfg)?
        }
    };
    g.clamp(out, 0.0, 1.0)
}

/// A configured codec with its parameters.
#[derive(Clone, Debug)]
pub struct Codec {
    pub cfg: CodecConfig,
    pub params: ParamStore<f32>,
}

impl Codec {
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<Self, CodecError> {
        cfg.validate()?;
        let params = init_params(&cfg, seed);
        Ok(Self { cfg, params })
    }

    /// Whether the channel-coding CNNs take part (false until stage 2).
    pub fn cc_active(&self) -> bool {
        self.params.find(META_CC).is_some_and(|id| self.params.get(id).data()[0] != 0.0)
    }

    pub fn set_cc_active(&mut self, on: bool) {
        let id = self.params.find(META_CC).expect("meta parameter");
        self.params.get_mut(id).data_mut()[0] = if on { 1.0 } else { 0.0 };
    }

    pub fn forward_mode(&self) -> ForwardMode {
        ForwardMode { use_cc: self.cc_active(), quant: QuantMode::Hard }
    }

    pub fn hash(&self) -> String {
        self.params.hash(None)
    }

    fn check_plan(&self, plan: &MaskPlan) -> Result<(), CodecError> {
        if plan.grid.rows() != self.cfg.rows() || plan.grid.cols() != self.cfg.cols() || plan.channels != self.cfg.channels
        {
            return Err(CodecError::Shape(format!(
                "plan grid {}x{} does not match codec grid {}x{}",
                plan.grid.rows(),
                plan.grid.cols(),
                self.cfg.rows(),
                self.cfg.cols()
            )));
        }
        Ok(())
    }

    /// Masked image → `2N` levels from {-3,-1,1,3}.
    pub fn encode(&self, p: &ImageTensor, plan: &MaskPlan) -> Result<Vec<f32>, CodecError> {
        let c = &self.cfg;
        if p.dims() != (c.height, c.width, c.channels) {
            return Err(CodecError::Shape(format!("image {:?} vs codec {}x{}x{}", p.dims(), c.height, c.width, c.channels)));
        }
        self.check_plan(plan)?;
        let mut g = Graph::new(&self.params);
        let img = g.input(Tensor::new(vec![c.height, c.width, c.channels], p.data().to_vec())?);
        let out = encode_graph(&mut g, c, img, plan, self.forward_mode())?;
        Ok(g.value(out).to_vec())
    }

    /// Received soft levels → decoded image `p̂`.
    pub fn decode(&self, levels: &[f32], plan: &MaskPlan) -> Result<ImageTensor, CodecError> {
        let c = &self.cfg;
        if levels.len() != c.n_levels() {
            return Err(CodecError::Shape(format!("{} levels, codec expects {}", levels.len(), c.n_levels())));
        }
        self.check_plan(plan)?;
        let mut g = Graph::new(&self.params);
        let latent = g.input(Tensor::new(vec![c.levels_per_patch(), c.rows(), c.cols()], dequantize(levels))?);
        let out = decode_graph(&mut g, c, latent, plan, self.cc_active())?;
        Ok(ImageTensor::new(c.height, c.width, c.channels, g.value(out).to_vec())?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CodecError> {
        save_checkpoint(&self.params, path)?;
        Ok(())
    }

    /// Load a checkpoint written for the same configuration.
    pub fn load(cfg: CodecConfig, path: &Path) -> Result<Self, CodecError> {
        let mut codec = Self::new(cfg, 0)?;
        load_checkpoint_into(&mut codec.params, path)?;
        Ok(codec)
    }
}
