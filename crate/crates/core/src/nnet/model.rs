use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS_ID, EOS_ID, PAD_ID};
use crate::error::{Error, Result};

use super::kernels::{self, apply_mask, dropout_mask, layer_norm, layer_norm_backward, NormCache};
use super::loss::smoothed_loss_rows;
use super::params::{Attn, DecLayer, EncLayer, Ffn, Layout, Lin, Norm};

fn default_true() -> bool {
    true
}

/// Architecture hyperparameters plus the identity of the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub vocab_fingerprint: String,
    pub max_positions: usize,
    pub source_language: String,
    pub target_language: String,
    #[serde(default = "default_true")]
    pub positional_encoding: bool,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelConfig {
    /// A small configuration; callers fill in vocabulary and languages.
    pub fn small(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            encoder_layers: 2,
            decoder_layers: 2,
            model_dim: 64,
            ffn_dim: 128,
            heads: 2,
            dropout: 0.1,
            vocab_size,
            vocab_fingerprint: String::new(),
            max_positions: 128,
            source_language: "src".into(),
            target_language: "tgt".into(),
            positional_encoding: true,
            init_seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model config: {m}")));
        if self.model_dim == 0 || self.ffn_dim == 0 || self.heads == 0 {
            return bad("dimensions must be positive");
        }
        if self.model_dim % self.heads != 0 {
            return bad("model_dim must be divisible by heads");
        }
        if self.model_dim % 2 != 0 {
            return bad("model_dim must be even");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.vocab_size <= crate::corpus::SPECIALS.len() {
            return bad("vocabulary has no ordinary tokens");
        }
        if self.max_positions < 2 {
            return bad("max_positions must be at least 2");
        }
        Ok(())
    }
}

/// Encoder-decoder transformer with a tied input/output embedding.
#[derive(Debug, Clone)]
pub struct Seq2SeqModel {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    pub(crate) layout: Layout,
    pub(crate) positions: Vec<f64>,
}

/// Padded id matrices for one batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub src_width: usize,
    pub tgt_width: usize,
    pub src: Vec<u32>,
    pub src_len: Vec<usize>,
    pub tgt_in: Vec<u32>,
    pub tgt_out: Vec<u32>,
}

impl Batch {
    /// Sources get a trailing EOS; targets become `BOS t` / `t EOS`.
    pub fn new(pairs: &[(&[u32], &[u32])]) -> Batch {
        let size = pairs.len();
        let src_width = pairs.iter().map(|p| p.0.len() + 1).max().unwrap_or(1);
        let tgt_width = pairs.iter().map(|p| p.1.len() + 1).max().unwrap_or(1);
        let mut src = vec![PAD_ID; size * src_width];
        let mut tgt_in = vec![PAD_ID; size * tgt_width];
        let mut tgt_out = vec![PAD_ID; size * tgt_width];
        let mut src_len = Vec::with_capacity(size);
        for (b, (s, t)) in pairs.iter().enumerate() {
            let row = &mut src[b * src_width..];
            row[..s.len()].copy_from_slice(s);
            row[s.len()] = EOS_ID;
            src_len.push(s.len() + 1);
            let ti = &mut tgt_in[b * tgt_width..];
            ti[0] = BOS_ID;
            ti[1..=t.len()].copy_from_slice(t);
            let to = &mut tgt_out[b * tgt_width..];
            to[..t.len()].copy_from_slice(t);
            to[t.len()] = EOS_ID;
        }
        Batch { size, src_width, tgt_width, src, src_len, tgt_in, tgt_out }
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().filter(|&&t| t != PAD_ID).count()
    }
}

/// Sums over one forward/backward pass.
#[derive(Debug, Clone)]
pub struct PassStats {
    pub loss_sum: f64,
    pub nll_sum: f64,
    pub tokens: usize,
}

struct AttnCache {
    xq: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    p: Vec<f64>,
    ctx: Vec<f64>,
    lq: usize,
    lk: usize,
}

struct FfnCache {
    x: Vec<f64>,
    h: Vec<f64>,
}

struct EncCache {
    ln1: NormCache,
    attn: AttnCache,
    m1: Option<Vec<f64>>,
    ln2: NormCache,
    ffn: FfnCache,
    m2: Option<Vec<f64>>,
}

struct DecCache {
    ln1: NormCache,
    self_attn: AttnCache,
    m1: Option<Vec<f64>>,
    ln2: NormCache,
    cross: AttnCache,
    m2: Option<Vec<f64>>,
    ln3: NormCache,
    ffn: FfnCache,
    m3: Option<Vec<f64>>,
}

struct Dims {
    b: usize,
    d: usize,
    heads: usize,
}

/// Two disjoint mutable windows of `g`; `first` must end before `second`.
fn pair_mut(
    g: &mut [f64],
    first: std::ops::Range<usize>,
    second: std::ops::Range<usize>,
) -> (&mut [f64], &mut [f64]) {
    debug_assert!(first.end <= second.start);
    let (lo, hi) = g.split_at_mut(second.start);
    (&mut lo[first], &mut hi[..second.end - second.start])
}

/// Scaled dot-product attention for every (batch, head) block.
#[allow(clippy::too_many_arguments)]
fn attention_core(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dims: &Dims,
    lq: usize,
    lk: usize,
    key_len: &[usize],
    causal: bool,
) -> (Vec<f64>, Vec<f64>) {
    let Dims { b, d, heads } = *dims;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut p = vec![0.0; b * heads * lq * lk];
    let mut ctx = vec![0.0; b * lq * d];
    for bi in 0..b {
        for h in 0..heads {
            let blk = &mut p[(bi * heads + h) * lq * lk..][..lq * lk];
            kernels::gemm_view(
                lq,
                dh,
                lk,
                scale,
                (q, bi * lq * d + h * dh, d, 1),
                (k, bi * lk * d + h * dh, 1, d),
                0.0,
                (blk, 0, lk, 1),
            );
            for i in 0..lq {
                let row = &mut blk[i * lk..(i + 1) * lk];
                let limit = if causal { key_len[bi].min(i + 1) } else { key_len[bi] };
                row[limit..].fill(f64::NEG_INFINITY);
                kernels::softmax_in_place(row);
            }
            kernels::gemm_view(
                lq,
                lk,
                dh,
                1.0,
                (blk, 0, lk, 1),
                (v, bi * lk * d + h * dh, d, 1),
                0.0,
                (&mut ctx, bi * lq * d + h * dh, d, 1),
            );
        }
    }
    (p, ctx)
}

/// Returns `(dq, dk, dv)` given the upstream gradient of the context.
fn attention_core_backward(c: &AttnCache, dctx: &[f64], dims: &Dims) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let Dims { b, d, heads } = *dims;
    let (lq, lk) = (c.lq, c.lk);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; b * lq * d];
    let mut dk = vec![0.0; b * lk * d];
    let mut dv = vec![0.0; b * lk * d];
    let mut ds = vec![0.0; lq * lk];
    for bi in 0..b {
        for h in 0..heads {
            let p = &c.p[(bi * heads + h) * lq * lk..][..lq * lk];
            let qo = bi * lq * d + h * dh;
            let ko = bi * lk * d + h * dh;
            // dP = dctx · Vᵀ
            kernels::gemm_view(lq, dh, lk, 1.0, (dctx, qo, d, 1), (&c.v, ko, 1, d), 0.0, (&mut ds, 0, lk, 1));
            // dV += Pᵀ · dctx
            kernels::gemm_view(lk, lq, dh, 1.0, (p, 0, 1, lk), (dctx, qo, d, 1), 1.0, (&mut dv, ko, d, 1));
            for i in 0..lq {
                let pr = &p[i * lk..(i + 1) * lk];
                let dr = &mut ds[i * lk..(i + 1) * lk];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (x, pv) in dr.iter_mut().zip(pr) {
                    *x = pv * (*x - dot);
                }
            }
            kernels::gemm_view(lq, lk, dh, scale, (&ds, 0, lk, 1), (&c.k, ko, d, 1), 1.0, (&mut dq, qo, d, 1));
            kernels::gemm_view(lk, lq, dh, scale, (&ds, 0, 1, lk), (&c.q, qo, d, 1), 1.0, (&mut dk, ko, d, 1));
        }
    }
    (dq, dk, dv)
}

impl Seq2SeqModel {
    pub fn new(config: ModelConfig) -> Result<Seq2SeqModel> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = layout.initialize(config.init_seed);
        Ok(Self::assemble(config, layout, params))
    }

    pub(crate) fn assemble(config: ModelConfig, layout: Layout, params: Vec<f64>) -> Seq2SeqModel {
        let positions = if config.positional_encoding {
            kernels::sinusoidal_positions(config.max_positions, config.model_dim)
        } else {
            vec![0.0; config.max_positions * config.model_dim]
        };
        Seq2SeqModel { config, params, layout, positions }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Values of a named tensor.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|s| &self.params[s.range()])
    }

    pub(crate) fn w(&self, l: &Lin) -> &[f64] {
        &self.params[l.w..l.w + l.inp * l.out]
    }

    pub(crate) fn bias(&self, l: &Lin) -> &[f64] {
        &self.params[l.b..l.b + l.out]
    }

    pub(crate) fn norm(&self, n: &Norm) -> (&[f64], &[f64]) {
        let d = self.config.model_dim;
        (&self.params[n.g..n.g + d], &self.params[n.b..n.b + d])
    }

    pub(crate) fn embedding(&self) -> &[f64] {
        let (v, d) = (self.config.vocab_size, self.config.model_dim);
        &self.params[self.layout.embed..self.layout.embed + v * d]
    }

    pub(crate) fn output_bias(&self) -> &[f64] {
        &self.params[self.layout.out_bias..self.layout.out_bias + self.config.vocab_size]
    }

    pub(crate) fn lin(&self, l: &Lin, x: &[f64], rows: usize) -> Vec<f64> {
        kernels::linear(x, self.w(l), self.bias(l), rows, l.inp, l.out)
    }

    pub(crate) fn ln(&self, n: &Norm, x: &[f64]) -> Vec<f64> {
        let (g, b) = self.norm(n);
        kernels::layer_norm_infer(x, g, b, self.config.model_dim)
    }

    pub(crate) fn ffn_infer(&self, f: &Ffn, x: &[f64], rows: usize) -> Vec<f64> {
        let mut h = self.lin(&f.fc1, x, rows);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        self.lin(&f.fc2, &h, rows)
    }

    fn lin_back(&self, l: &Lin, x: &[f64], dy: &[f64], rows: usize, g: &mut [f64]) -> Vec<f64> {
        let (dw, db) = pair_mut(g, l.w..l.w + l.inp * l.out, l.b..l.b + l.out);
        kernels::linear_backward(x, self.w(l), dy, rows, l.inp, l.out, dw, db)
    }

    fn ln_fwd(&self, n: &Norm, x: &[f64]) -> (Vec<f64>, NormCache) {
        let (g, b) = self.norm(n);
        layer_norm(x, g, b, self.config.model_dim)
    }

    fn ln_back(&self, n: &Norm, c: &NormCache, dy: &[f64], g: &mut [f64]) -> Vec<f64> {
        let d = self.config.model_dim;
        let (dg, db) = pair_mut(g, n.g..n.g + d, n.b..n.b + d);
        layer_norm_backward(dy, c, &self.params[n.g..n.g + d], d, dg, db)
    }

    /// Token embedding scaled by `sqrt(d)` plus position encoding.
    pub(crate) fn embed_rows(&self, tokens: &[u32], positions: &[usize]) -> Vec<f64> {
        let d = self.config.model_dim;
        let scale = (d as f64).sqrt();
        let e = self.embedding();
        let mut x = vec![0.0; tokens.len() * d];
        for (r, (&t, &p)) in tokens.iter().zip(positions).enumerate() {
            let row = &mut x[r * d..(r + 1) * d];
            let er = &e[t as usize * d..(t as usize + 1) * d];
            let pr = &self.positions[p * d..(p + 1) * d];
            for i in 0..d {
                row[i] = er[i] * scale + pr[i];
            }
        }
        x
    }

    fn embed_back(&self, tokens: &[u32], dx: &[f64], g: &mut [f64]) {
        let d = self.config.model_dim;
        let scale = (d as f64).sqrt();
        let base = self.layout.embed;
        for (r, &t) in tokens.iter().enumerate() {
            let gr = &mut g[base + t as usize * d..base + (t as usize + 1) * d];
            for (gv, dv) in gr.iter_mut().zip(&dx[r * d..(r + 1) * d]) {
                *gv += dv * scale;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attn_fwd(
        &self,
        a: &Attn,
        xq: Vec<f64>,
        xkv: Option<&[f64]>,
        dims: &Dims,
        lq: usize,
        lk: usize,
        key_len: &[usize],
        causal: bool,
    ) -> (Vec<f64>, AttnCache) {
        let q = self.lin(&a.q, &xq, dims.b * lq);
        let kv_in = xkv.unwrap_or(&xq);
        let k = self.lin(&a.k, kv_in, dims.b * lk);
        let v = self.lin(&a.v, kv_in, dims.b * lk);
        let (p, ctx) = attention_core(&q, &k, &v, dims, lq, lk, key_len, causal);
        let out = self.lin(&a.o, &ctx, dims.b * lq);
        (out, AttnCache { xq, q, k, v, p, ctx, lq, lk })
    }

    /// Returns `(dxq, dxkv)`.
    fn attn_back(
        &self,
        a: &Attn,
        c: &AttnCache,
        xkv: Option<&[f64]>,
        dout: &[f64],
        dims: &Dims,
        g: &mut [f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let rq = dims.b * c.lq;
        let rk = dims.b * c.lk;
        let dctx = self.lin_back(&a.o, &c.ctx, dout, rq, g);
        let (dq, dk, dv) = attention_core_backward(c, &dctx, dims);
        let kv_in = xkv.unwrap_or(&c.xq);
        let dxq = self.lin_back(&a.q, &c.xq, &dq, rq, g);
        let mut dxkv = self.lin_back(&a.k, kv_in, &dk, rk, g);
        let dxv = self.lin_back(&a.v, kv_in, &dv, rk, g);
        add_into(&mut dxkv, &dxv);
        (dxq, dxkv)
    }

    fn ffn_fwd(&self, f: &Ffn, x: Vec<f64>, rows: usize) -> (Vec<f64>, FfnCache) {
        let mut h = self.lin(&f.fc1, &x, rows);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        let out = self.lin(&f.fc2, &h, rows);
        (out, FfnCache { x, h })
    }

    fn ffn_back(&self, f: &Ffn, c: &FfnCache, dout: &[f64], rows: usize, g: &mut [f64]) -> Vec<f64> {
        let mut dh = self.lin_back(&f.fc2, &c.h, dout, rows, g);
        for (d, h) in dh.iter_mut().zip(&c.h) {
            if *h <= 0.0 {
                *d = 0.0;
            }
        }
        self.lin_back(&f.fc1, &c.x, &dh, rows, g)
    }

    fn enc_layer_fwd(
        &self,
        l: &EncLayer,
        x: &mut [f64],
        dims: &Dims,
        ls: usize,
        src_len: &[usize],
        drop: &mut Dropper,
    ) -> EncCache {
        let rows = dims.b * ls;
        let (h, ln1) = self.ln_fwd(&l.ln_attn, x);
        let (mut a, attn) = self.attn_fwd(&l.attn, h, None, dims, ls, ls, src_len, false);
        let m1 = drop.mask(a.len());
        apply_mask(&mut a, &m1);
        add_into(x, &a);
        let (h2, ln2) = self.ln_fwd(&l.ln_ffn, x);
        let (mut f, ffn) = self.ffn_fwd(&l.ffn, h2, rows);
        let m2 = drop.mask(f.len());
        apply_mask(&mut f, &m2);
        add_into(x, &f);
        EncCache { ln1, attn, m1, ln2, ffn, m2 }
    }

    fn enc_layer_back(&self, l: &EncLayer, c: &EncCache, dx: &mut [f64], dims: &Dims, rows: usize, g: &mut [f64]) {
        let mut df = dx.to_vec();
        apply_mask(&mut df, &c.m2);
        let dh2 = self.ffn_back(&l.ffn, &c.ffn, &df, rows, g);
        add_into(dx, &self.ln_back(&l.ln_ffn, &c.ln2, &dh2, g));
        let mut da = dx.to_vec();
        apply_mask(&mut da, &c.m1);
        let (mut dh, dkv) = self.attn_back(&l.attn, &c.attn, None, &da, dims, g);
        add_into(&mut dh, &dkv);
        add_into(dx, &self.ln_back(&l.ln_attn, &c.ln1, &dh, g));
    }

    #[allow(clippy::too_many_arguments)]
    fn dec_layer_fwd(
        &self,
        l: &DecLayer,
        y: &mut [f64],
        enc: &[f64],
        dims: &Dims,
        lt: usize,
        ls: usize,
        src_len: &[usize],
        drop: &mut Dropper,
    ) -> DecCache {
        let rows = dims.b * lt;
        let full = vec![lt; dims.b];
        let (h, ln1) = self.ln_fwd(&l.ln_self, y);
        let (mut a, self_attn) = self.attn_fwd(&l.self_attn, h, None, dims, lt, lt, &full, true);
        let m1 = drop.mask(a.len());
        apply_mask(&mut a, &m1);
        add_into(y, &a);
        let (h, ln2) = self.ln_fwd(&l.ln_cross, y);
        let (mut c, cross) = self.attn_fwd(&l.cross_attn, h, Some(enc), dims, lt, ls, src_len, false);
        let m2 = drop.mask(c.len());
        apply_mask(&mut c, &m2);
        add_into(y, &c);
        let (h, ln3) = self.ln_fwd(&l.ln_ffn, y);
        let (mut f, ffn) = self.ffn_fwd(&l.ffn, h, rows);
        let m3 = drop.mask(f.len());
        apply_mask(&mut f, &m3);
        add_into(y, &f);
        DecCache { ln1, self_attn, m1, ln2, cross, m2, ln3, ffn, m3 }
    }

    #[allow(clippy::too_many_arguments)]
    fn dec_layer_back(
        &self,
        l: &DecLayer,
        c: &DecCache,
        dy: &mut [f64],
        denc: &mut [f64],
        enc: &[f64],
        dims: &Dims,
        rows: usize,
        g: &mut [f64],
    ) {
        let mut df = dy.to_vec();
        apply_mask(&mut df, &c.m3);
        let dh = self.ffn_back(&l.ffn, &c.ffn, &df, rows, g);
        add_into(dy, &self.ln_back(&l.ln_ffn, &c.ln3, &dh, g));

        let mut dc = dy.to_vec();
        apply_mask(&mut dc, &c.m2);
        let (dh, dkv) = self.attn_back(&l.cross_attn, &c.cross, Some(enc), &dc, dims, g);
        add_into(denc, &dkv);
        add_into(dy, &self.ln_back(&l.ln_cross, &c.ln2, &dh, g));

        let mut da = dy.to_vec();
        apply_mask(&mut da, &c.m1);
        let (mut dh, dkv) = self.attn_back(&l.self_attn, &c.self_attn, None, &da, dims, g);
        add_into(&mut dh, &dkv);
        add_into(dy, &self.ln_back(&l.ln_self, &c.ln1, &dh, g));
    }

    /// Encoder output `[b * src_width, d]` for inference.
    pub(crate) fn encode_batch(&self, batch: &Batch) -> Vec<f64> {
        let mut drop = Dropper::off();
        self.encoder_forward(batch, &mut drop).0
    }

    fn encoder_forward(&self, batch: &Batch, drop: &mut Dropper) -> (Vec<f64>, Vec<EncCache>, Option<Vec<f64>>, NormCache) {
        let dims = self.dims(batch.size);
        let ls = batch.src_width;
        let pos: Vec<usize> = (0..batch.size * ls).map(|r| r % ls).collect();
        let mut x = self.embed_rows(&batch.src, &pos);
        let m0 = drop.mask(x.len());
        apply_mask(&mut x, &m0);
        let caches = self
            .layout
            .enc
            .iter()
            .map(|l| self.enc_layer_fwd(l, &mut x, &dims, ls, &batch.src_len, drop))
            .collect();
        let (out, ln) = self.ln_fwd(&self.layout.enc_norm, &x);
        (out, caches, m0, ln)
    }

    fn dims(&self, b: usize) -> Dims {
        Dims { b, d: self.config.model_dim, heads: self.config.heads }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let v = self.config.vocab_size as u32;
        if let Some(&id) = batch.src.iter().chain(&batch.tgt_in).find(|&&t| t >= v) {
            return Err(Error::TokenOutOfRange { id, vocab: v as usize });
        }
        let longest = batch.src_width.max(batch.tgt_width);
        if longest > self.config.max_positions {
            return Err(Error::TooLong { len: longest, max: self.config.max_positions });
        }
        Ok(())
    }

    /// Full pass over a batch. With `grads`, gradients of the summed smoothed
    /// loss are accumulated into it. `dropout_seed = None` disables dropout.
    pub fn pass(
        &self,
        batch: &Batch,
        smoothing: f64,
        dropout_seed: Option<u64>,
        grads: Option<&mut [f64]>,
    ) -> Result<PassStats> {
        self.check_batch(batch)?;
        let mut drop = match dropout_seed {
            Some(s) if self.config.dropout > 0.0 => Dropper::on(self.config.dropout, s),
            _ => Dropper::off(),
        };
        let d = self.config.model_dim;
        let dims = self.dims(batch.size);
        let (ls, lt) = (batch.src_width, batch.tgt_width);

        let (enc, enc_caches, m_src, enc_ln) = self.encoder_forward(batch, &mut drop);

        let pos: Vec<usize> = (0..batch.size * lt).map(|r| r % lt).collect();
        let mut y = self.embed_rows(&batch.tgt_in, &pos);
        let m_tgt = drop.mask(y.len());
        apply_mask(&mut y, &m_tgt);
        let dec_caches: Vec<DecCache> = self
            .layout
            .dec
            .iter()
            .map(|l| self.dec_layer_fwd(l, &mut y, &enc, &dims, lt, ls, &batch.src_len, &mut drop))
            .collect();
        let (hf, dec_ln) = self.ln_fwd(&self.layout.dec_norm, &y);

        let keep: Vec<usize> = (0..batch.size * lt).filter(|&r| batch.tgt_out[r] != PAD_ID).collect();
        let n = keep.len();
        let mut hsel = vec![0.0; n * d];
        for (i, &r) in keep.iter().enumerate() {
            hsel[i * d..(i + 1) * d].copy_from_slice(&hf[r * d..(r + 1) * d]);
        }
        let targets: Vec<u32> = keep.iter().map(|&r| batch.tgt_out[r]).collect();
        let mut logits = self.project(&hsel, n);
        let (loss_sum, nll_sum) = smoothed_loss_rows(&mut logits, &targets, self.config.vocab_size, smoothing);
        let stats = PassStats { loss_sum, nll_sum, tokens: n };
        if !loss_sum.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss_sum}")));
        }
        let Some(g) = grads else {
            return Ok(stats);
        };
        let dlogits = logits;

        let v = self.config.vocab_size;
        let eb = self.layout.embed;
        kernels::gemm(v, n, d, &dlogits, true, &hsel, false, &mut g[eb..eb + v * d], true);
        let ob = self.layout.out_bias;
        for row in dlogits.chunks_exact(v) {
            add_into(&mut g[ob..ob + v], row);
        }
        let mut dhsel = vec![0.0; n * d];
        kernels::gemm(n, v, d, &dlogits, false, self.embedding(), false, &mut dhsel, false);
        let mut dhf = vec![0.0; batch.size * lt * d];
        for (i, &r) in keep.iter().enumerate() {
            dhf[r * d..(r + 1) * d].copy_from_slice(&dhsel[i * d..(i + 1) * d]);
        }

        let mut dy = self.ln_back(&self.layout.dec_norm, &dec_ln, &dhf, g);
        let mut denc = vec![0.0; enc.len()];
        for (l, c) in self.layout.dec.iter().zip(&dec_caches).rev() {
            self.dec_layer_back(l, c, &mut dy, &mut denc, &enc, &dims, batch.size * lt, g);
        }
        apply_mask(&mut dy, &m_tgt);
        self.embed_back(&batch.tgt_in, &dy, g);

        let mut dx = self.ln_back(&self.layout.enc_norm, &enc_ln, &denc, g);
        for (l, c) in self.layout.enc.iter().zip(&enc_caches).rev() {
            self.enc_layer_back(l, c, &mut dx, &dims, batch.size * ls, g);
        }
        apply_mask(&mut dx, &m_src);
        self.embed_back(&batch.src, &dx, g);
        Ok(stats)
    }

    /// Output logits `[rows, V] = h · Eᵀ + b`.
    pub(crate) fn project(&self, h: &[f64], rows: usize) -> Vec<f64> {
        let (v, d) = (self.config.vocab_size, self.config.model_dim);
        let mut logits = vec![0.0; rows * v];
        kernels::gemm(rows, d, v, h, false, self.embedding(), true, &mut logits, false);
        let bias = self.output_bias();
        for row in logits.chunks_exact_mut(v) {
            add_into(row, bias);
        }
        logits
    }

    /// Mean smoothed loss over one batch and its gradient, dropout off.
    pub fn loss_and_gradients(&self, pairs: &[(&[u32], &[u32])], smoothing: f64) -> Result<(f64, Vec<f64>)> {
        let batch = Batch::new(pairs);
        let mut g = vec![0.0; self.param_count()];
        let s = self.pass(&batch, smoothing, None, Some(&mut g))?;
        if s.tokens == 0 {
            return Err(Error::Data("batch has no target tokens".into()));
        }
        let inv = 1.0 / s.tokens as f64;
        g.iter_mut().for_each(|x| *x *= inv);
        Ok((s.loss_sum * inv, g))
    }

    /// Log-probabilities at every target position: row `i` is the
    /// distribution after `BOS prefix[..i]`.
    pub fn forward(&self, source: &[u32], prefix: &[u32]) -> Result<Vec<Vec<f64>>> {
        let batch = Batch::new(&[(source, prefix)]);
        self.check_batch(&batch)?;
        let dims = self.dims(1);
        let mut drop = Dropper::off();
        let (enc, ..) = self.encoder_forward(&batch, &mut drop);
        let lt = batch.tgt_width;
        let pos: Vec<usize> = (0..lt).collect();
        let mut y = self.embed_rows(&batch.tgt_in, &pos);
        for l in &self.layout.dec {
            self.dec_layer_fwd(l, &mut y, &enc, &dims, lt, batch.src_width, &batch.src_len, &mut drop);
        }
        let h = self.ln(&self.layout.dec_norm, &y);
        let logits = self.project(&h, lt);
        let v = self.config.vocab_size;
        Ok(logits
            .chunks_exact(v)
            .map(|r| {
                let mut r = r.to_vec();
                kernels::log_softmax_in_place(&mut r);
                r
            })
            .collect())
    }
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Draws dropout masks from a dedicated stream.
struct Dropper {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropper {
    fn off() -> Dropper {
        Dropper { p: 0.0, rng: None }
    }

    fn on(p: f64, seed: u64) -> Dropper {
        Dropper { p, rng: Some(crate::util::rng(seed)) }
    }

    fn mask(&mut self, len: usize) -> Option<Vec<f64>> {
        self.rng.as_mut().and_then(|r| dropout_mask(len, self.p, r))
    }
}
