//! Step-by-step decoding with cached self-attention keys and values.

use crate::corpus::{BOS_ID, EOS_ID, PAD_ID};
use crate::decode::StepModel;
use crate::error::{Error, Result};

use super::kernels::{log_softmax_in_place, softmax_in_place};
use super::model::{add_into, Batch, Seq2SeqModel};
use super::params::Attn;

/// Encoder output projected into per-layer cross-attention keys and values.
#[derive(Debug, Clone)]
pub struct EncodedSource {
    cross_k: Vec<Vec<f64>>,
    cross_v: Vec<Vec<f64>>,
    len: usize,
}

/// Self-attention cache of one hypothesis.
#[derive(Debug, Clone)]
pub struct DecoderState {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pos: usize,
}

/// Attention of a single query row over `n` cached key/value rows.
fn attend_row(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, heads: usize, out: &mut [f64]) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut w = vec![0.0; n];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        for (j, wj) in w.iter_mut().enumerate() {
            let kh = &k[j * d + h * dh..j * d + (h + 1) * dh];
            *wj = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        softmax_in_place(&mut w);
        let oh = &mut out[h * dh..(h + 1) * dh];
        oh.fill(0.0);
        for (j, wj) in w.iter().enumerate() {
            for (o, x) in oh.iter_mut().zip(&v[j * d + h * dh..j * d + (h + 1) * dh]) {
                *o += wj * x;
            }
        }
    }
}

impl Seq2SeqModel {
    fn cross_kv(&self, a: &Attn, enc: &[f64], len: usize) -> (Vec<f64>, Vec<f64>) {
        (self.lin(&a.k, enc, len), self.lin(&a.v, enc, len))
    }

    /// Encoder output rows (`source` plus EOS) for one sentence.
    pub fn encoder_output(&self, source: &[u32]) -> Result<Vec<f64>> {
        self.check_source(source)?;
        Ok(self.encode_batch(&Batch::new(&[(source, &[][..])])))
    }

    fn check_source(&self, source: &[u32]) -> Result<()> {
        let v = self.config.vocab_size as u32;
        if let Some(&id) = source.iter().find(|&&t| t >= v) {
            return Err(Error::TokenOutOfRange { id, vocab: v as usize });
        }
        if source.len() + 1 > self.config.max_positions {
            return Err(Error::TooLong { len: source.len() + 1, max: self.config.max_positions });
        }
        Ok(())
    }

    /// Runs the encoder once for a source sentence.
    pub fn encode_source(&self, source: &[u32]) -> Result<EncodedSource> {
        self.check_source(source)?;
        let batch = Batch::new(&[(source, &[][..])]);
        let enc = self.encode_batch(&batch);
        let len = batch.src_width;
        let (cross_k, cross_v) = self.layout.dec.iter().map(|l| self.cross_kv(&l.cross_attn, &enc, len)).unzip();
        Ok(EncodedSource { cross_k, cross_v, len })
    }

    pub fn start_state(&self) -> DecoderState {
        let n = self.layout.dec.len();
        DecoderState { k: vec![Vec::new(); n], v: vec![Vec::new(); n], pos: 0 }
    }

    /// Feeds one token per state and returns next-token log-probabilities.
    pub fn decode_step(&self, src: &EncodedSource, states: &mut [DecoderState], tokens: &[u32]) -> Vec<Vec<f64>> {
        let r = states.len();
        let d = self.config.model_dim;
        let heads = self.config.heads;
        let pos: Vec<usize> = states.iter().map(|s| s.pos.min(self.config.max_positions - 1)).collect();
        let mut x = self.embed_rows(tokens, &pos);
        for (li, l) in self.layout.dec.iter().enumerate() {
            let h = self.ln(&l.ln_self, &x);
            let q = self.lin(&l.self_attn.q, &h, r);
            let k = self.lin(&l.self_attn.k, &h, r);
            let v = self.lin(&l.self_attn.v, &h, r);
            let mut ctx = vec![0.0; r * d];
            for (i, s) in states.iter_mut().enumerate() {
                s.k[li].extend_from_slice(&k[i * d..(i + 1) * d]);
                s.v[li].extend_from_slice(&v[i * d..(i + 1) * d]);
                let n = s.pos + 1;
                attend_row(&q[i * d..(i + 1) * d], &s.k[li], &s.v[li], n, d, heads, &mut ctx[i * d..(i + 1) * d]);
            }
            add_into(&mut x, &self.lin(&l.self_attn.o, &ctx, r));

            let h = self.ln(&l.ln_cross, &x);
            let q = self.lin(&l.cross_attn.q, &h, r);
            for i in 0..r {
                attend_row(
                    &q[i * d..(i + 1) * d],
                    &src.cross_k[li],
                    &src.cross_v[li],
                    src.len,
                    d,
                    heads,
                    &mut ctx[i * d..(i + 1) * d],
                );
            }
            add_into(&mut x, &self.lin(&l.cross_attn.o, &ctx, r));

            let h = self.ln(&l.ln_ffn, &x);
            add_into(&mut x, &self.ffn_infer(&l.ffn, &h, r));
        }
        for s in states.iter_mut() {
            s.pos += 1;
        }
        let h = self.ln(&self.layout.dec_norm, &x);
        let v = self.config.vocab_size;
        self.project(&h, r)
            .chunks_exact(v)
            .map(|row| {
                let mut row = row.to_vec();
                log_softmax_in_place(&mut row);
                row
            })
            .collect()
    }
}

impl StepModel for Seq2SeqModel {
    type Source = EncodedSource;
    type State = DecoderState;

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_steps(&self) -> usize {
        self.config.max_positions
    }

    fn is_emittable(&self, token: u32) -> bool {
        token != PAD_ID && token != BOS_ID
    }

    fn bos(&self) -> u32 {
        BOS_ID
    }

    fn eos(&self) -> u32 {
        EOS_ID
    }

    fn prepare(&self, source: &[u32]) -> Result<EncodedSource> {
        self.encode_source(source)
    }

    fn initial_state(&self, _source: &EncodedSource) -> DecoderState {
        self.start_state()
    }

    fn step(&self, source: &EncodedSource, states: &mut [DecoderState], tokens: &[u32]) -> Vec<Vec<f64>> {
        self.decode_step(source, states, tokens)
    }
}
