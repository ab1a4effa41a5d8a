//! The Conformer-lite CTC encoder.
//!
//! Block layout: FFN1 (half-scaled residual) -> MHSA -> CONV -> FFN2
//! (half-scaled residual) -> final layer norm, pre-norm everywhere. Gate
//! semantics per group: an FFN chunk gate scales its hidden-slice
//! activations, a head gate scales that head's context before the output
//! projection, and conv / layer-granularity gates scale the whole module
//! output before the residual add. A gate of exactly 1.0 takes the ungated
//! code path, so all-ones masks are bit-identical to no mask.

use crate::autodiff::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::encoder::config::{
    EncoderConfig, Granularity, FRONTEND_KERNEL, FRONTEND_PAD, FRONTEND_STRIDE,
};
use crate::encoder::groups::{
    chunk_param_names, conv_param_names, head_param_names, GroupRegistry, Kind,
};
use crate::error::{Error, Result};
use crate::rng::{hash_str, stream_key, streams, CounterRng};

/// A per-group gate value: a fixed constant (hard masks, evaluation) or a
/// tape node (learned soft masks, straight-through and hard-concrete gates).
#[derive(Clone, Copy, Debug)]
pub enum Gate<S> {
    Const(S),
    Var(Var),
}

#[derive(Clone, Debug)]
pub struct FfnChunk {
    pub sub: usize,
    gid: Option<usize>,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
}

#[derive(Clone, Debug)]
pub struct FfnModule {
    pub present: bool,
    gid_layer: Option<usize>,
    norm_g: ParamId,
    norm_b: ParamId,
    bias: ParamId,
    pub chunks: Vec<FfnChunk>,
}

#[derive(Clone, Debug)]
pub struct HeadSlot {
    pub sub: usize,
    gid: Option<usize>,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Debug)]
pub struct MhsaModule {
    pub present: bool,
    gid_layer: Option<usize>,
    norm_g: ParamId,
    norm_b: ParamId,
    bias: ParamId,
    pub heads: Vec<HeadSlot>,
}

#[derive(Clone, Debug)]
pub struct ConvModule {
    pub present: bool,
    gid: Option<usize>,
    norm_g: ParamId,
    norm_b: ParamId,
    bias: ParamId,
    pw1_w: ParamId,
    pw1_b: ParamId,
    dw_w: ParamId,
    dw_b: ParamId,
    pw2_w: ParamId,
}

#[derive(Clone, Debug)]
pub struct BlockArch {
    pub ffn1: FfnModule,
    pub mhsa: MhsaModule,
    pub conv: ConvModule,
    pub ffn2: FfnModule,
}

/// Structural description of an encoder: which components are physically
/// present, plus parameter handles into an associated [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub n_groups: usize,
    frontend_conv_w: ParamId,
    frontend_conv_b: ParamId,
    frontend_proj_w: ParamId,
    frontend_proj_b: ParamId,
    pos: ParamId,
    final_g: ParamId,
    final_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    aux_w: ParamId,
    aux_b: ParamId,
    pub blocks: Vec<BlockArch>,
}

/// Stochastic-regularization context for a training forward. Evaluation
/// passes `None` for the whole context.
#[derive(Clone, Copy, Debug)]
pub struct DropoutCtx<'a> {
    pub seed: u64,
    pub step: u64,
    /// Distinguishes RNG streams when several models forward in one step
    /// (supernet = 0, subnet m = 1 + m).
    pub model_tag: u64,
    pub base_rate: f64,
    /// Per-FFN hidden dropout rates, indexed `block*2 + slot` (slot 0 =
    /// FFN1, 1 = FFN2); `None` means `base_rate` everywhere.
    pub ffn_rates: Option<&'a [f64]>,
    pub layer_drop: Option<LayerDropCtx<'a>>,
}

/// Structured layer dropout: modules flagged droppable are skipped with
/// probability `p` per forward.
#[derive(Clone, Copy, Debug)]
pub struct LayerDropCtx<'a> {
    pub p: f64,
    /// Indexed `block*4 + kind.index()`.
    pub droppable: &'a [bool],
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOpts<'a, S> {
    /// Per-group gates indexed by registry id; `None` runs ungated.
    pub gates: Option<&'a [Gate<S>]>,
    pub dropout: Option<DropoutCtx<'a>>,
}

impl<'a, S> ForwardOpts<'a, S> {
    pub fn eval() -> Self {
        Self {
            gates: None,
            dropout: None,
        }
    }
}

enum InitKind {
    FanInUniform,
    Zeros,
    Ones,
    SmallNormal,
}

fn init_tensor<S: Scalar>(seed: u64, name: &str, rows: usize, cols: usize, kind: InitKind) -> Tensor<S> {
    let mut rng = CounterRng::new(seed, &[streams::INIT, hash_str(name)]);
    match kind {
        InitKind::Zeros => Tensor::zeros(rows, cols),
        InitKind::Ones => Tensor::full(rows, cols, S::one()),
        InitKind::SmallNormal => Tensor::randn(rows, cols, 0.02, &mut rng),
        InitKind::FanInUniform => {
            let bound = (6.0 / rows as f64).sqrt();
            Tensor::rand_uniform(rows, cols, bound, &mut rng)
        }
    }
}

/// Build a fresh encoder with seed-deterministic initialization.
pub fn build<S: Scalar>(
    config: &EncoderConfig,
    seed: u64,
) -> Result<(Encoder, ParamStore<S>, GroupRegistry)> {
    let registry = GroupRegistry::build(config)?;
    let (enc, store) = assemble(config, &registry, None, true, |name, rows, cols, kind| {
        Ok(init_tensor::<S>(seed, name, rows, cols, kind))
    })?;
    Ok((enc, store, registry))
}

impl Encoder {
    /// Physically remove the components of every group masked 0, returning a
    /// smaller encoder and its parameter store. Base parameters are always
    /// retained. The mask must be binary.
    pub fn structural_prune<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        registry: &GroupRegistry,
        mask: &[u8],
    ) -> Result<(Encoder, ParamStore<S>)> {
        check_mask(mask, registry.len())?;
        assemble(&self.config, registry, Some(mask), false, |name, _, _, _| {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
            Ok(store.value(id).clone())
        })
    }

    /// Full forward: frontend, blocks, final norm, output head, per-frame
    /// log-softmax over V labels + blank.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        features: &Tensor<S>,
        opts: &ForwardOpts<S>,
    ) -> Result<Var> {
        let x = self.encode(tape, store, features, opts, self.blocks.len())?;
        let g = tape.param(store, self.final_g);
        let b = tape.param(store, self.final_b);
        let x = tape.layer_norm(x, g, b)?;
        let w = tape.param(store, self.out_w);
        let ob = tape.param(store, self.out_b);
        let logits = tape.matmul(x, w)?;
        let logits = tape.add_bias(logits, ob)?;
        Ok(tape.log_softmax_rows(logits))
    }

    /// Auxiliary head: project the output of block `split_block` (1-based)
    /// with the distinct auxiliary parameters.
    pub fn aux_head_forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        features: &Tensor<S>,
        split_block: usize,
        opts: &ForwardOpts<S>,
    ) -> Result<Var> {
        if split_block < 1 || split_block > self.blocks.len() {
            return Err(Error::Contract(format!(
                "split_block {split_block} outside 1..={}",
                self.blocks.len()
            )));
        }
        let x = self.encode(tape, store, features, opts, split_block)?;
        let w = tape.param(store, self.aux_w);
        let b = tape.param(store, self.aux_b);
        let logits = tape.matmul(x, w)?;
        let logits = tape.add_bias(logits, b)?;
        Ok(tape.log_softmax_rows(logits))
    }

    fn encode<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        features: &Tensor<S>,
        opts: &ForwardOpts<S>,
        depth: usize,
    ) -> Result<Var> {
        if features.cols() != self.config.input_dim {
            return Err(Error::Contract(format!(
                "features have {} dims, encoder expects {}",
                features.cols(),
                self.config.input_dim
            )));
        }
        if let Some(g) = opts.gates {
            if g.len() != self.n_groups {
                return Err(Error::Contract(format!(
                    "mask length {} does not match {} groups",
                    g.len(),
                    self.n_groups
                )));
            }
        }

        let x0 = tape.constant(features.clone());
        let cw = tape.param(store, self.frontend_conv_w);
        let mut x = tape.conv1d(x0, cw, FRONTEND_KERNEL, FRONTEND_STRIDE, FRONTEND_PAD)?;
        let cb = tape.param(store, self.frontend_conv_b);
        x = tape.add_bias(x, cb)?;
        x = tape.swish(x);
        let pw = tape.param(store, self.frontend_proj_w);
        x = tape.matmul(x, pw)?;
        let pb = tape.param(store, self.frontend_proj_b);
        x = tape.add_bias(x, pb)?;

        let frames = tape.value(x).rows();
        if frames > self.config.max_frames {
            return Err(Error::Contract(format!(
                "{frames} subsampled frames exceed max_frames {}",
                self.config.max_frames
            )));
        }
        let pos = tape.param(store, self.pos);
        let idx: Vec<usize> = (0..frames).collect();
        let pos_rows = tape.gather_rows(pos, &idx)?;
        x = tape.add(x, pos_rows)?;

        for (b, block) in self.blocks.iter().take(depth).enumerate() {
            x = self.ffn_forward(tape, store, x, &block.ffn1, b, Kind::Ffn1, opts)?;
            x = self.mhsa_forward(tape, store, x, &block.mhsa, b, opts)?;
            x = self.conv_forward(tape, store, x, &block.conv, b, opts)?;
            x = self.ffn_forward(tape, store, x, &block.ffn2, b, Kind::Ffn2, opts)?;
        }
        Ok(x)
    }

    fn ffn_forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        module: &FfnModule,
        block: usize,
        kind: Kind,
        opts: &ForwardOpts<S>,
    ) -> Result<Var> {
        if !module.present || layer_dropped(opts, block, kind) {
            return Ok(x);
        }
        let ng = tape.param(store, module.norm_g);
        let nb = tape.param(store, module.norm_b);
        let h = tape.layer_norm(x, ng, nb)?;
        let slot = if kind == Kind::Ffn1 { 0 } else { 1 };
        let rate = match opts.dropout {
            Some(ctx) => ctx
                .ffn_rates
                .map(|r| r[block * 2 + slot])
                .unwrap_or(ctx.base_rate),
            None => 0.0,
        };
        let mut acc: Option<Var> = None;
        for chunk in &module.chunks {
            let w1 = tape.param(store, chunk.w1);
            let b1 = tape.param(store, chunk.b1);
            let mut hc = tape.matmul(h, w1)?;
            hc = tape.add_bias(hc, b1)?;
            hc = tape.swish(hc);
            hc = apply_gate(tape, hc, gate_for(opts.gates, chunk.gid))?;
            if rate > 0.0 {
                let key = drop_key(opts, block, kind, 10 + chunk.sub as u64);
                hc = tape.dropout(hc, rate, key)?;
            }
            let w2 = tape.param(store, chunk.w2);
            let term = tape.matmul(hc, w2)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        let rows = tape.value(x).rows();
        let sum = match acc {
            Some(a) => a,
            None => tape.constant(Tensor::zeros(rows, self.config.d_model)),
        };
        let ob = tape.param(store, module.bias);
        let mut out = tape.add_bias(sum, ob)?;
        if let Some(ctx) = opts.dropout {
            if ctx.base_rate > 0.0 {
                out = tape.dropout(out, ctx.base_rate, drop_key(opts, block, kind, 0))?;
            }
        }
        out = apply_gate(tape, out, gate_for(opts.gates, module.gid_layer))?;
        out = tape.scale(out, 0.5);
        tape.add(x, out)
    }

    fn mhsa_forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        module: &MhsaModule,
        block: usize,
        opts: &ForwardOpts<S>,
    ) -> Result<Var> {
        if !module.present || layer_dropped(opts, block, Kind::Mhsa) {
            return Ok(x);
        }
        let ng = tape.param(store, module.norm_g);
        let nb = tape.param(store, module.norm_b);
        let h = tape.layer_norm(x, ng, nb)?;
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let mut acc: Option<Var> = None;
        for head in &module.heads {
            let wq = tape.param(store, head.wq);
            let bq = tape.param(store, head.bq);
            let q0 = tape.matmul(h, wq)?;
            let q = tape.add_bias(q0, bq)?;
            let wk = tape.param(store, head.wk);
            let bk = tape.param(store, head.bk);
            let k0 = tape.matmul(h, wk)?;
            let k = tape.add_bias(k0, bk)?;
            let wv = tape.param(store, head.wv);
            let bv = tape.param(store, head.bv);
            let v0 = tape.matmul(h, wv)?;
            let v = tape.add_bias(v0, bv)?;
            let kt = tape.transpose(k);
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores, 1.0)?;
            let mut ctx = tape.matmul(attn, v)?;
            ctx = apply_gate(tape, ctx, gate_for(opts.gates, head.gid))?;
            let wo = tape.param(store, head.wo);
            let oh = tape.matmul(ctx, wo)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, oh)?,
                None => oh,
            });
        }
        let rows = tape.value(x).rows();
        let sum = match acc {
            Some(a) => a,
            None => tape.constant(Tensor::zeros(rows, self.config.d_model)),
        };
        let ob = tape.param(store, module.bias);
        let mut out = tape.add_bias(sum, ob)?;
        if let Some(ctx) = opts.dropout {
            if ctx.base_rate > 0.0 {
                out = tape.dropout(out, ctx.base_rate, drop_key(opts, block, Kind::Mhsa, 0))?;
            }
        }
        out = apply_gate(tape, out, gate_for(opts.gates, module.gid_layer))?;
        tape.add(x, out)
    }

    fn conv_forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        module: &ConvModule,
        block: usize,
        opts: &ForwardOpts<S>,
    ) -> Result<Var> {
        if !module.present || layer_dropped(opts, block, Kind::Conv) {
            return Ok(x);
        }
        let d = self.config.d_model;
        let ng = tape.param(store, module.norm_g);
        let nb = tape.param(store, module.norm_b);
        let h = tape.layer_norm(x, ng, nb)?;
        let pw1 = tape.param(store, module.pw1_w);
        let u0 = tape.matmul(h, pw1)?;
        let pb1 = tape.param(store, module.pw1_b);
        let u = tape.add_bias(u0, pb1)?;
        // GLU: first half gated by the sigmoid of the second half
        let a = tape.slice_cols(u, 0, d)?;
        let g = tape.slice_cols(u, d, d)?;
        let sg = tape.sigmoid(g);
        let gated = tape.mul(a, sg)?;
        let dw = tape.param(store, module.dw_w);
        let pad = (self.config.conv_kernel - 1) / 2;
        let c0 = tape.depthwise_conv1d(gated, dw, pad)?;
        let db = tape.param(store, module.dw_b);
        let c = tape.add_bias(c0, db)?;
        let c = tape.swish(c);
        let pw2 = tape.param(store, module.pw2_w);
        let o0 = tape.matmul(c, pw2)?;
        let ob = tape.param(store, module.bias);
        let mut out = tape.add_bias(o0, ob)?;
        if let Some(ctx) = opts.dropout {
            if ctx.base_rate > 0.0 {
                out = tape.dropout(out, ctx.base_rate, drop_key(opts, block, Kind::Conv, 0))?;
            }
        }
        out = apply_gate(tape, out, gate_for(opts.gates, module.gid))?;
        tape.add(x, out)
    }
}

fn layer_dropped<S>(opts: &ForwardOpts<S>, block: usize, kind: Kind) -> bool {
    let Some(ctx) = &opts.dropout else {
        return false;
    };
    let Some(ld) = &ctx.layer_drop else {
        return false;
    };
    if !ld.droppable[block * 4 + kind.index()] {
        return false;
    }
    let mut rng = CounterRng::from_key(stream_key(
        ctx.seed,
        &[
            streams::LAYER_DROP,
            ctx.step,
            ctx.model_tag,
            (block * 4 + kind.index()) as u64,
        ],
    ));
    rng.chance(ld.p)
}

fn drop_key<S>(opts: &ForwardOpts<S>, block: usize, kind: Kind, site: u64) -> u64 {
    let ctx = opts.dropout.as_ref().expect("dropout ctx present");
    stream_key(
        ctx.seed,
        &[
            streams::DROPOUT,
            ctx.step,
            ctx.model_tag,
            block as u64,
            kind.index() as u64,
            site,
        ],
    )
}

fn gate_for<S: Copy>(gates: Option<&[Gate<S>]>, gid: Option<usize>) -> Option<Gate<S>> {
    match (gates, gid) {
        (Some(g), Some(i)) => Some(g[i]),
        _ => None,
    }
}

fn apply_gate<S: Scalar>(tape: &mut Tape<S>, x: Var, gate: Option<Gate<S>>) -> Result<Var> {
    match gate {
        None => Ok(x),
        Some(Gate::Const(c)) if c == S::one() => Ok(x),
        Some(Gate::Const(c)) => Ok(tape.scale(x, Scalar::to_f64(c))),
        Some(Gate::Var(v)) => tape.mul_scalar_var(x, v),
    }
}

pub fn check_mask(mask: &[u8], n: usize) -> Result<()> {
    if mask.len() != n {
        return Err(Error::Contract(format!(
            "mask length {} does not match {} groups",
            mask.len(),
            n
        )));
    }
    if mask.iter().any(|&m| m > 1) {
        return Err(Error::Contract("mask is not binary".into()));
    }
    Ok(())
}

/// Convert a binary mask into constant gates.
pub fn mask_gates<S: Scalar>(mask: &[u8]) -> Vec<Gate<S>> {
    mask.iter()
        .map(|&m| Gate::Const(if m == 1 { S::one() } else { S::zero() }))
        .collect()
}

fn assemble<S: Scalar>(
    config: &EncoderConfig,
    registry: &GroupRegistry,
    mask: Option<&[u8]>,
    with_gids: bool,
    mut source: impl FnMut(&str, usize, usize, InitKind) -> Result<Tensor<S>>,
) -> Result<(Encoder, ParamStore<S>)> {
    config.validate()?;
    let mut store = ParamStore::new();
    let d = config.d_model;
    let keep = |gid: usize| mask.map_or(true, |m| m[gid] == 1);

    let mut reg = |store: &mut ParamStore<S>,
                   name: &str,
                   rows: usize,
                   cols: usize,
                   kind: InitKind,
                   source: &mut dyn FnMut(&str, usize, usize, InitKind) -> Result<Tensor<S>>|
     -> Result<ParamId> {
        let t = source(name, rows, cols, kind)?;
        if t.shape() != [rows, cols] {
            return Err(Error::Contract(format!(
                "{name}: expected {rows}x{cols}, got {:?}",
                t.shape()
            )));
        }
        store.register(name, t)
    };

    let frontend_conv_w = reg(
        &mut store,
        "frontend/conv_w",
        FRONTEND_KERNEL * config.input_dim,
        d,
        InitKind::FanInUniform,
        &mut source,
    )?;
    let frontend_conv_b = reg(&mut store, "frontend/conv_b", 1, d, InitKind::Zeros, &mut source)?;
    let frontend_proj_w = reg(&mut store, "frontend/proj_w", d, d, InitKind::FanInUniform, &mut source)?;
    let frontend_proj_b = reg(&mut store, "frontend/proj_b", 1, d, InitKind::Zeros, &mut source)?;
    let pos = reg(
        &mut store,
        "frontend/pos",
        config.max_frames,
        d,
        InitKind::SmallNormal,
        &mut source,
    )?;

    let mut blocks = Vec::with_capacity(config.num_blocks);
    for b in 0..config.num_blocks {
        let mut ffns = Vec::with_capacity(2);
        for kind in [Kind::Ffn1, Kind::Ffn2] {
            let ks = kind.as_str();
            let norm_g = reg(
                &mut store,
                &format!("block{b}/{ks}/norm/gamma"),
                1,
                d,
                InitKind::Ones,
                &mut source,
            )?;
            let norm_b = reg(
                &mut store,
                &format!("block{b}/{ks}/norm/beta"),
                1,
                d,
                InitKind::Zeros,
                &mut source,
            )?;
            let bias = reg(
                &mut store,
                &format!("block{b}/{ks}/bias"),
                1,
                d,
                InitKind::Zeros,
                &mut source,
            )?;
            let gid_layer = match config.granularity {
                Granularity::Layer => registry.index_of(b, kind, 0),
                Granularity::Component => None,
            };
            let module_kept = gid_layer.map_or(true, keep);
            let mut chunks = Vec::new();
            if module_kept {
                for c in 0..config.num_chunks() {
                    let gid = match config.granularity {
                        Granularity::Component => registry.index_of(b, kind, c),
                        Granularity::Layer => None,
                    };
                    if let Some(g) = gid {
                        if !keep(g) {
                            continue;
                        }
                    }
                    let names = chunk_param_names(b, kind, c);
                    let ck = config.chunk_size();
                    let w1 = reg(&mut store, &names[0], d, ck, InitKind::FanInUniform, &mut source)?;
                    let b1 = reg(&mut store, &names[1], 1, ck, InitKind::Zeros, &mut source)?;
                    let w2 = reg(&mut store, &names[2], ck, d, InitKind::FanInUniform, &mut source)?;
                    chunks.push(FfnChunk {
                        sub: c,
                        gid: if with_gids { gid } else { None },
                        w1,
                        b1,
                        w2,
                    });
                }
            }
            ffns.push(FfnModule {
                present: module_kept,
                gid_layer: if with_gids { gid_layer } else { None },
                norm_g,
                norm_b,
                bias,
                chunks,
            });
        }
        let ffn2 = ffns.pop().expect("two ffns");
        let ffn1 = ffns.pop().expect("two ffns");

        let norm_g = reg(
            &mut store,
            &format!("block{b}/mhsa/norm/gamma"),
            1,
            d,
            InitKind::Ones,
            &mut source,
        )?;
        let norm_b = reg(
            &mut store,
            &format!("block{b}/mhsa/norm/beta"),
            1,
            d,
            InitKind::Zeros,
            &mut source,
        )?;
        let bias = reg(&mut store, &format!("block{b}/mhsa/bias"), 1, d, InitKind::Zeros, &mut source)?;
        let gid_layer = match config.granularity {
            Granularity::Layer => registry.index_of(b, Kind::Mhsa, 0),
            Granularity::Component => None,
        };
        let module_kept = gid_layer.map_or(true, keep);
        let mut heads = Vec::new();
        if module_kept {
            let dh = config.head_dim();
            for hidx in 0..config.num_heads() {
                let gid = match config.granularity {
                    Granularity::Component => registry.index_of(b, Kind::Mhsa, hidx),
                    Granularity::Layer => None,
                };
                if let Some(g) = gid {
                    if !keep(g) {
                        continue;
                    }
                }
                let names = head_param_names(b, hidx);
                let wq = reg(&mut store, &names[0], d, dh, InitKind::FanInUniform, &mut source)?;
                let bq = reg(&mut store, &names[1], 1, dh, InitKind::Zeros, &mut source)?;
                let wk = reg(&mut store, &names[2], d, dh, InitKind::FanInUniform, &mut source)?;
                let bk = reg(&mut store, &names[3], 1, dh, InitKind::Zeros, &mut source)?;
                let wv = reg(&mut store, &names[4], d, dh, InitKind::FanInUniform, &mut source)?;
                let bv = reg(&mut store, &names[5], 1, dh, InitKind::Zeros, &mut source)?;
                let wo = reg(&mut store, &names[6], dh, d, InitKind::FanInUniform, &mut source)?;
                heads.push(HeadSlot {
                    sub: hidx,
                    gid: if with_gids { gid } else { None },
                    wq,
                    bq,
                    wk,
                    bk,
                    wv,
                    bv,
                    wo,
                });
            }
        }
        let mhsa = MhsaModule {
            present: module_kept,
            gid_layer: if with_gids { gid_layer } else { None },
            norm_g,
            norm_b,
            bias,
            heads,
        };

        let norm_g = reg(
            &mut store,
            &format!("block{b}/conv/norm/gamma"),
            1,
            d,
            InitKind::Ones,
            &mut source,
        )?;
        let norm_b = reg(
            &mut store,
            &format!("block{b}/conv/norm/beta"),
            1,
            d,
            InitKind::Zeros,
            &mut source,
        )?;
        let bias = reg(&mut store, &format!("block{b}/conv/bias"), 1, d, InitKind::Zeros, &mut source)?;
        let gid = registry.index_of(b, Kind::Conv, 0);
        let conv_kept = gid.map_or(true, keep);
        let names = conv_param_names(b);
        let (mut pw1_w, mut pw1_b, mut dw_w, mut dw_b, mut pw2_w) =
            (ParamId(0), ParamId(0), ParamId(0), ParamId(0), ParamId(0));
        if conv_kept {
            pw1_w = reg(&mut store, &names[0], d, 2 * d, InitKind::FanInUniform, &mut source)?;
            pw1_b = reg(&mut store, &names[1], 1, 2 * d, InitKind::Zeros, &mut source)?;
            dw_w = reg(
                &mut store,
                &names[2],
                config.conv_kernel,
                d,
                InitKind::FanInUniform,
                &mut source,
            )?;
            dw_b = reg(&mut store, &names[3], 1, d, InitKind::Zeros, &mut source)?;
            pw2_w = reg(&mut store, &names[4], d, d, InitKind::FanInUniform, &mut source)?;
        }
        let conv = ConvModule {
            present: conv_kept,
            gid: if with_gids { gid } else { None },
            norm_g,
            norm_b,
            bias,
            pw1_w,
            pw1_b,
            dw_w,
            dw_b,
            pw2_w,
        };

        blocks.push(BlockArch {
            ffn1,
            mhsa,
            conv,
            ffn2,
        });
    }

    let final_g = reg(&mut store, "final_norm/gamma", 1, d, InitKind::Ones, &mut source)?;
    let final_b = reg(&mut store, "final_norm/beta", 1, d, InitKind::Zeros, &mut source)?;
    let classes = config.classes();
    let out_w = reg(&mut store, "output/w", d, classes, InitKind::FanInUniform, &mut source)?;
    let out_b = reg(&mut store, "output/b", 1, classes, InitKind::Zeros, &mut source)?;
    let aux_w = reg(&mut store, "aux/w", d, classes, InitKind::FanInUniform, &mut source)?;
    let aux_b = reg(&mut store, "aux/b", 1, classes, InitKind::Zeros, &mut source)?;

    Ok((
        Encoder {
            config: config.clone(),
            n_groups: registry.len(),
            frontend_conv_w,
            frontend_conv_b,
            frontend_proj_w,
            frontend_proj_b,
            pos,
            final_g,
            final_b,
            out_w,
            out_b,
            aux_w,
            aux_b,
            blocks,
        },
        store,
    ))
}
