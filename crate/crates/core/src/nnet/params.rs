//! Flat parameter storage with stable tensor names.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::util::rng_for;

use super::ModelConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Lin {
    pub w: usize,
    pub b: usize,
    pub inp: usize,
    pub out: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Attn {
    pub q: Lin,
    pub k: Lin,
    pub v: Lin,
    pub o: Lin,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Ffn {
    pub fc1: Lin,
    pub fc2: Lin,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncLayer {
    pub ln_attn: Norm,
    pub attn: Attn,
    pub ln_ffn: Norm,
    pub ffn: Ffn,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecLayer {
    pub ln_self: Norm,
    pub self_attn: Attn,
    pub ln_cross: Norm,
    pub cross_attn: Attn,
    pub ln_ffn: Norm,
    pub ffn: Ffn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Zeros,
    Ones,
    Xavier { fan_in: usize, fan_out: usize },
    Embedding { dim: usize },
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
    inits: Vec<Init>,
    pub total: usize,
    pub(crate) embed: usize,
    pub(crate) out_bias: usize,
    pub(crate) enc: Vec<EncLayer>,
    pub(crate) enc_norm: Norm,
    pub(crate) dec: Vec<DecLayer>,
    pub(crate) dec_norm: Norm,
}

struct Builder {
    specs: Vec<ParamSpec>,
    inits: Vec<Init>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let offset = self.total;
        let spec = ParamSpec { name, shape, offset };
        self.total += spec.numel();
        self.specs.push(spec);
        self.inits.push(init);
        offset
    }

    fn lin(&mut self, prefix: &str, inp: usize, out: usize) -> Lin {
        let w = self.add(
            format!("{prefix}.weight"),
            vec![out, inp],
            Init::Xavier { fan_in: inp, fan_out: out },
        );
        let b = self.add(format!("{prefix}.bias"), vec![out], Init::Zeros);
        Lin { w, b, inp, out }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        let g = self.add(format!("{prefix}.gamma"), vec![d], Init::Ones);
        let b = self.add(format!("{prefix}.beta"), vec![d], Init::Zeros);
        Norm { g, b }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Attn {
        Attn {
            q: self.lin(&format!("{prefix}.q"), d, d),
            k: self.lin(&format!("{prefix}.k"), d, d),
            v: self.lin(&format!("{prefix}.v"), d, d),
            o: self.lin(&format!("{prefix}.o"), d, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> Ffn {
        Ffn {
            fc1: self.lin(&format!("{prefix}.fc1"), d, f),
            fc2: self.lin(&format!("{prefix}.fc2"), f, d),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let (d, f, v) = (cfg.model_dim, cfg.ffn_dim, cfg.vocab_size);
        let mut b = Builder { specs: Vec::new(), inits: Vec::new(), total: 0 };
        let embed = b.add("embed.weight".into(), vec![v, d], Init::Embedding { dim: d });
        let out_bias = b.add("output.bias".into(), vec![v], Init::Zeros);
        let enc = (0..cfg.encoder_layers)
            .map(|i| {
                let p = format!("encoder.layers.{i}");
                EncLayer {
                    ln_attn: b.norm(&format!("{p}.self_attn_norm"), d),
                    attn: b.attn(&format!("{p}.self_attn"), d),
                    ln_ffn: b.norm(&format!("{p}.ffn_norm"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, f),
                }
            })
            .collect();
        let enc_norm = b.norm("encoder.final_norm", d);
        let dec = (0..cfg.decoder_layers)
            .map(|i| {
                let p = format!("decoder.layers.{i}");
                DecLayer {
                    ln_self: b.norm(&format!("{p}.self_attn_norm"), d),
                    self_attn: b.attn(&format!("{p}.self_attn"), d),
                    ln_cross: b.norm(&format!("{p}.cross_attn_norm"), d),
                    cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                    ln_ffn: b.norm(&format!("{p}.ffn_norm"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, f),
                }
            })
            .collect();
        let dec_norm = b.norm("decoder.final_norm", d);
        Layout {
            specs: b.specs,
            inits: b.inits,
            total: b.total,
            embed,
            out_bias,
            enc,
            enc_norm,
            dec,
            dec_norm,
        }
    }

    pub fn find(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// Initial values. Each tensor draws from its own stream so that the
    /// values of one tensor do not depend on the shapes of the others.
    pub fn initialize(&self, seed: u64) -> Vec<f64> {
        let mut params = vec![0.0; self.total];
        for (i, (spec, init)) in self.specs.iter().zip(&self.inits).enumerate() {
            let slice = &mut params[spec.range()];
            let mut rng = rng_for(seed, i as u64);
            match *init {
                Init::Zeros => {}
                Init::Ones => slice.fill(1.0),
                Init::Xavier { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    slice.iter_mut().for_each(|x| *x = rng.gen_range(-a..a));
                }
                Init::Embedding { dim } => {
                    let a = (3.0 / dim as f64).sqrt();
                    slice.iter_mut().for_each(|x| *x = rng.gen_range(-a..a));
                }
            }
        }
        params
    }

    /// Boolean mask over the flat vector: `true` for frozen entries.
    ///
    /// Patterns are exact names or prefixes ending in `*`.
    pub fn frozen_mask(&self, patterns: &[String]) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for spec in &self.specs {
            if patterns.iter().any(|p| pattern_matches(p, &spec.name)) {
                mask[spec.range()].fill(true);
            }
        }
        mask
    }
}

pub fn pattern_matches(pattern: &str, name: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some(prefix) => name.starts_with(prefix),
        None => pattern == name,
    }
}
