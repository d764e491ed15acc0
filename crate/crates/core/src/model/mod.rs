//! The network: a strided convolutional image encoder producing an `H x W`
//! feature grid, a transformer text encoder, fusion of both, and an
//! autoregressive decoder that generates answers over the full vocabulary.
//!
//! All stacks are pre-layernorm transformers. Relative position biases are
//! learned per stack (text encoder, fusion, decoder) and shared by the
//! layers of that stack.
//!
//! Training and evaluation run batched: every example of a batch is packed
//! into one row block and attention is restricted to per-example segments.

mod config;
mod relbias;

pub use config::{FusionKind, ModelConfig};
pub use relbias::{text_bucket, FusedBuckets, Segment};

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{AttnLayout, AttnSegment, ConvGeometry, Graph, Var};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::raster::Raster;
use crate::seeded_rng;
use crate::tasks::EncodedExample;
use crate::tensor::Tensor;
use crate::text::{TokenSeq, EOS, PAD};

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    ln1: Norm,
    attn: Attn,
    cross: Option<(Norm, Attn)>,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct Handles {
    convs: Vec<(ParamId, ParamId)>,
    img_proj: Linear,
    img_pos: ParamId,
    embed: ParamId,
    text_bias: ParamId,
    text_layers: Vec<Layer>,
    fusion_bias: ParamId,
    fusion_layers: Vec<Layer>,
    fusion_norm: Option<Norm>,
    dec_bias: ParamId,
    dec_layers: Vec<Layer>,
    dec_norm: Norm,
    out: Linear,
}

struct Builder<'a, R> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: rand::Rng> Builder<'_, R> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool, std: f64) -> Result<Linear> {
        let w = self.store.insert_random(&format!("{name}.w"), &[fan_in, fan_out], std, self.rng)?;
        let b = if bias {
            Some(self.store.insert_const(&format!("{name}.b"), &[fan_out], 0.0)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.store.insert_const(&format!("{name}.gain"), &[d], 1.0)?,
            bias: self.store.insert_const(&format!("{name}.bias"), &[d], 0.0)?,
        })
    }

    fn attn(&mut self, name: &str, d: usize) -> Result<Attn> {
        let std = 1.0 / math::sqrt(d as f64);
        Ok(Attn {
            q: self.linear(&format!("{name}.q"), d, d, false, std)?.w,
            k: self.linear(&format!("{name}.k"), d, d, false, std)?.w,
            v: self.linear(&format!("{name}.v"), d, d, false, std)?.w,
            o: self.linear(&format!("{name}.o"), d, d, false, std)?.w,
        })
    }

    fn layer(&mut self, name: &str, d: usize, ff: usize, cross: bool) -> Result<Layer> {
        let ln1 = self.norm(&format!("{name}.ln1"), d)?;
        let attn = self.attn(&format!("{name}.attn"), d)?;
        let cross = if cross {
            Some((
                self.norm(&format!("{name}.ln_cross"), d)?,
                self.attn(&format!("{name}.cross"), d)?,
            ))
        } else {
            None
        };
        let ln2 = self.norm(&format!("{name}.ln2"), d)?;
        let ff1 = self.linear(&format!("{name}.ff1"), d, ff, true, 1.0 / math::sqrt(d as f64))?;
        let ff2 = self.linear(&format!("{name}.ff2"), ff, d, true, 1.0 / math::sqrt(ff as f64))?;
        Ok(Layer {
            ln1,
            attn,
            cross,
            ln2,
            ff1,
            ff2,
        })
    }
}

/// Features of one image: `[H, W, d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub features: Tensor,
    pub image_id: Option<u64>,
}

/// Output of fusion. Under concat fusion the rows are
/// `[image_1 | image_2? | text]`; under encoder/decoder fusion only the text
/// positions remain.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedSequence {
    pub features: Tensor,
    pub segments: Vec<Segment>,
}

impl FusedSequence {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Inputs of one example for generation.
#[derive(Debug, Clone, Copy)]
pub struct Prompt<'a> {
    pub images: &'a [Raster],
    pub input_ids: &'a [u32],
}

/// Row spans of each example inside a packed block.
type Spans = Vec<(usize, usize)>;

#[derive(Default)]
struct BucketCache {
    text: BTreeMap<(usize, bool), Arc<[u32]>>,
    fused: BTreeMap<(usize, usize), Arc<[u32]>>,
}

/// The model: configuration, parameters and the fingerprint of the
/// vocabulary it was built for.
#[derive(Debug, Clone)]
pub struct AnswerMe {
    config: ModelConfig,
    params: ParamStore,
    vocab_fingerprint: u64,
    h: Handles,
}

impl AnswerMe {
    pub fn new(config: ModelConfig, vocab_fingerprint: u64, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let h = Self::build(&config, &mut params, &mut rng)?;
        Ok(Self {
            config,
            params,
            vocab_fingerprint,
            h,
        })
    }

    /// Rebuilds a model around stored parameters; every name and shape must
    /// match what `config` defines.
    pub fn from_params(config: ModelConfig, vocab_fingerprint: u64, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, vocab_fingerprint, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, configuration defines {}",
                params.len(),
                model.params.len()
            )));
        }
        for (_, name, t) in params.iter() {
            if model.params.id(name).is_none() {
                return Err(Error::UnknownParameter(name.into()));
            }
            model.params.set(name, t.clone())?;
        }
        Ok(model)
    }

    fn build<R: rand::Rng>(c: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Handles> {
        let d = c.d_model;
        let mut b = Builder { store, rng };
        let mut convs = Vec::new();
        let mut in_c = 3;
        for (i, &out_c) in c.conv_channels.iter().enumerate() {
            let fan_in = 9 * in_c;
            let w = b.store.insert_random(
                &format!("image.conv{i}.w"),
                &[fan_in, out_c],
                math::sqrt(2.0 / fan_in as f64),
                b.rng,
            )?;
            let bias = b.store.insert_const(&format!("image.conv{i}.b"), &[out_c], 0.0)?;
            convs.push((w, bias));
            in_c = out_c;
        }
        let img_proj = b.linear("image.proj", in_c, d, true, 1.0 / math::sqrt(in_c as f64))?;
        let img_pos = b.store.insert_random("image.pos", &[c.grid_len(), d], 0.1, b.rng)?;
        let embed = b.store.insert_random("embed", &[c.vocab_size, d], 1.0, b.rng)?;

        let text_bias = b.store.insert_random("text.relbias", &[c.text_buckets, c.text_heads], 0.1, b.rng)?;
        let text_layers = (0..c.text_layers)
            .map(|i| b.layer(&format!("text.layer{i}"), d, c.ff_dim, false))
            .collect::<Result<Vec<_>>>()?;

        let fusion_rows = match c.fusion_kind {
            FusionKind::ConcatEncoder => fused_buckets(c).table_rows(),
            FusionKind::EncoderDecoder => c.text_buckets,
        };
        let fusion_bias = b.store.insert_random("fusion.relbias", &[fusion_rows, c.fusion_heads], 0.1, b.rng)?;
        let xattn = c.fusion_kind == FusionKind::EncoderDecoder;
        let fusion_layers = (0..c.fusion_layers)
            .map(|i| b.layer(&format!("fusion.layer{i}"), d, c.ff_dim, xattn))
            .collect::<Result<Vec<_>>>()?;
        let fusion_norm = if c.fusion_layers > 0 {
            Some(b.norm("fusion.norm", d)?)
        } else {
            None
        };

        let dec_bias = b.store.insert_random("decoder.relbias", &[c.text_buckets, c.decoder_heads], 0.1, b.rng)?;
        let dec_layers = (0..c.decoder_layers)
            .map(|i| b.layer(&format!("decoder.layer{i}"), d, c.ff_dim, true))
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = b.norm("decoder.norm", d)?;
        // small output weights so an untrained model predicts near-uniformly
        let out = b.linear("decoder.out", d, c.vocab_size, true, 0.02)?;
        Ok(Handles {
            convs,
            img_proj,
            img_pos,
            embed,
            text_bias,
            text_layers,
            fusion_bias,
            fusion_layers,
            fusion_norm,
            dec_bias,
            dec_layers,
            dec_norm,
            out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn vocab_fingerprint(&self) -> u64 {
        self.vocab_fingerprint
    }

    /// Total number of learned scalars.
    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    // ----- building blocks -------------------------------------------------

    fn p(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(&self.params, id)
    }

    fn linear(&self, g: &mut Graph, l: Linear, x: Var) -> Result<Var> {
        let w = self.p(g, l.w);
        let y = g.matmul(x, w)?;
        match l.b {
            Some(b) => {
                let b = self.p(g, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    fn norm(&self, g: &mut Graph, n: Norm, x: Var) -> Result<Var> {
        let gain = self.p(g, n.gain);
        let bias = self.p(g, n.bias);
        g.layernorm(x, gain, bias, self.config.layernorm_eps)
    }

    fn attend(
        &self,
        g: &mut Graph,
        a: Attn,
        queries: Var,
        memory: Var,
        table: Option<ParamId>,
        layout: AttnLayout,
    ) -> Result<Var> {
        let wq = self.p(g, a.q);
        let wk = self.p(g, a.k);
        let wv = self.p(g, a.v);
        let wo = self.p(g, a.o);
        let q = g.matmul(queries, wq)?;
        let k = g.matmul(memory, wk)?;
        let v = g.matmul(memory, wv)?;
        let table = table.map(|t| self.p(g, t));
        let ctx = g.attention(q, k, v, table, layout)?;
        g.matmul(ctx, wo)
    }

    /// One pre-LN layer: self-attention, optional cross-attention, FFN.
    fn layer(
        &self,
        g: &mut Graph,
        layer: &Layer,
        x: Var,
        self_layout: AttnLayout,
        table: Option<ParamId>,
        cross: Option<(Var, AttnLayout)>,
    ) -> Result<Var> {
        let h = self.norm(g, layer.ln1, x)?;
        let a = self.attend(g, layer.attn, h, h, table, self_layout)?;
        let mut x = g.add(x, a)?;
        if let (Some((ln, attn)), Some((memory, layout))) = (layer.cross, cross) {
            let h = self.norm(g, ln, x)?;
            let a = self.attend(g, attn, h, memory, None, layout)?;
            x = g.add(x, a)?;
        }
        let h = self.norm(g, layer.ln2, x)?;
        let f = self.linear(g, layer.ff1, h)?;
        let f = g.gelu(f);
        let f = self.linear(g, layer.ff2, f)?;
        g.add(x, f)
    }

    fn text_buckets(&self, cache: &mut BucketCache, len: usize, bidirectional: bool) -> Arc<[u32]> {
        let c = &self.config;
        cache
            .text
            .entry((len, bidirectional))
            .or_insert_with(|| {
                let mut v = Vec::with_capacity(len * len);
                for q in 0..len {
                    for k in 0..len {
                        v.push(text_bucket(k as i64 - q as i64, bidirectional, c.text_buckets, c.max_distance));
                    }
                }
                v.into()
            })
            .clone()
    }

    fn self_layout(
        &self,
        cache: &mut BucketCache,
        spans: &[(usize, usize)],
        heads: usize,
        causal: bool,
    ) -> AttnLayout {
        AttnLayout {
            heads,
            causal,
            segments: spans
                .iter()
                .map(|&(start, len)| AttnSegment {
                    q_start: start,
                    q_len: len,
                    k_start: start,
                    k_len: len,
                    buckets: Some(self.text_buckets(cache, len, !causal)),
                })
                .collect(),
        }
    }

    fn cross_layout(q: &[(usize, usize)], k: &[(usize, usize)], heads: usize) -> AttnLayout {
        AttnLayout {
            heads,
            causal: false,
            segments: q
                .iter()
                .zip(k)
                .map(|(&(qs, ql), &(ks, kl))| AttnSegment {
                    q_start: qs,
                    q_len: ql,
                    k_start: ks,
                    k_len: kl,
                    buckets: None,
                })
                .collect(),
        }
    }

    // ----- graph-level stages ----------------------------------------------

    /// Packs images into the `[N, height, width, 3]` pixel tensor.
    pub fn pixel_tensor(&self, images: &[&Raster]) -> Result<Tensor> {
        let c = &self.config;
        let mut data = Vec::with_capacity(images.len() * c.image_height * c.image_width * 3);
        for img in images {
            if (img.height(), img.width()) != (c.image_height, c.image_width) {
                return Err(Error::ImageSize {
                    got: (img.height(), img.width()),
                    expected: (c.image_height, c.image_width),
                });
            }
            data.extend(img.to_unit());
        }
        Tensor::new(vec![images.len(), c.image_height, c.image_width, 3], data)
    }

    /// Image encoder on a packed pixel tensor; returns `[N * H * W, d]`
    /// rows, each image's grid in row-major order.
    pub fn encode_images_on(&self, g: &mut Graph, pixels: Var) -> Result<Var> {
        let c = &self.config;
        let n = g.value(pixels).shape()[0];
        let (mut h, mut w, mut in_c) = (c.image_height, c.image_width, 3);
        let mut x = pixels;
        for (&(cw, cb), &out_c) in self.h.convs.iter().zip(&c.conv_channels) {
            let geom = ConvGeometry {
                batch: n,
                in_h: h,
                in_w: w,
                in_c,
                out_c,
                kernel: 3,
                stride: 2,
                pad: 1,
            };
            let wv = self.p(g, cw);
            let bv = self.p(g, cb);
            x = g.conv2d(x, wv, bv, geom)?;
            x = g.gelu(x);
            h = geom.out_h();
            w = geom.out_w();
            in_c = out_c;
        }
        let grid = h * w;
        let x = g.reshape(x, vec![n * grid, in_c])?;
        let x = self.linear(g, self.h.img_proj, x)?;
        let pos = self.p(g, self.h.img_pos);
        let idx: Vec<usize> = (0..n).flat_map(|_| 0..grid).collect();
        let pos = g.gather_rows(pos, &idx)?;
        g.add(x, pos)
    }

    /// Text encoder over packed sequences; returns `[sum L, d]` and spans.
    fn encode_texts_on(&self, g: &mut Graph, cache: &mut BucketCache, seqs: &[&[u32]]) -> Result<(Var, Spans)> {
        let c = &self.config;
        let mut ids = Vec::new();
        let mut spans = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.len() > c.max_text_len {
                return Err(Error::SequenceTooLong {
                    len: s.len(),
                    max: c.max_text_len,
                });
            }
            spans.push((ids.len(), s.len()));
            ids.extend(s.iter().map(|&t| t as usize));
        }
        let table = self.p(g, self.h.embed);
        let mut x = g.embedding(table, &ids)?;
        for layer in &self.h.text_layers {
            let layout = self.self_layout(cache, &spans, c.text_heads, false);
            x = self.layer(g, layer, x, layout, Some(self.h.text_bias), None)?;
        }
        Ok((x, spans))
    }

    /// Fusion of packed image rows and text rows. `img_counts[i]` images of
    /// example `i` are consecutive in `img` (`H * W` rows each).
    fn fuse_on(
        &self,
        g: &mut Graph,
        cache: &mut BucketCache,
        img: Var,
        img_counts: &[usize],
        text: Var,
        text_spans: &[(usize, usize)],
    ) -> Result<(Var, Spans)> {
        let c = &self.config;
        let grid = c.grid_len();
        let mut img_spans = Vec::with_capacity(img_counts.len());
        let mut next = 0;
        for &n in img_counts {
            if n == 0 || n > 2 {
                return Err(Error::ImageCount(n));
            }
            img_spans.push((next, n * grid));
            next += n * grid;
        }
        match c.fusion_kind {
            FusionKind::ConcatEncoder => {
                let text_base = g.value(img).rows();
                let both = g.concat_rows(&[img, text])?;
                let mut order = Vec::new();
                let mut spans = Vec::with_capacity(img_counts.len());
                for (&(is, il), &(ts, tl)) in img_spans.iter().zip(text_spans) {
                    spans.push((order.len(), il + tl));
                    order.extend(is..is + il);
                    order.extend(text_base + ts..text_base + ts + tl);
                }
                let mut x = g.gather_rows(both, &order)?;
                if self.h.fusion_layers.is_empty() {
                    return Ok((x, spans));
                }
                let fb = fused_buckets(c);
                for layer in &self.h.fusion_layers {
                    let layout = AttnLayout {
                        heads: c.fusion_heads,
                        causal: false,
                        segments: spans
                            .iter()
                            .zip(img_counts.iter().zip(text_spans))
                            .map(|(&(start, len), (&n_img, &(_, tl)))| AttnSegment {
                                q_start: start,
                                q_len: len,
                                k_start: start,
                                k_len: len,
                                buckets: Some(
                                    cache
                                        .fused
                                        .entry((n_img, tl))
                                        .or_insert_with(|| fb.build(n_img, tl).into())
                                        .clone(),
                                ),
                            })
                            .collect(),
                    };
                    x = self.layer(g, layer, x, layout, Some(self.h.fusion_bias), None)?;
                }
                if let Some(n) = self.h.fusion_norm {
                    x = self.norm(g, n, x)?;
                }
                Ok((x, spans))
            }
            FusionKind::EncoderDecoder => {
                let mut x = text;
                for layer in &self.h.fusion_layers {
                    let layout = self.self_layout(cache, text_spans, c.fusion_heads, false);
                    let cross = Self::cross_layout(text_spans, &img_spans, c.fusion_heads);
                    x = self.layer(g, layer, x, layout, Some(self.h.fusion_bias), Some((img, cross)))?;
                }
                if let Some(n) = self.h.fusion_norm {
                    x = self.norm(g, n, x)?;
                }
                Ok((x, text_spans.to_vec()))
            }
        }
    }

    /// Decoder over packed prefixes (each starting with PAD); returns
    /// `[sum T, V]` logits.
    fn decode_on(
        &self,
        g: &mut Graph,
        cache: &mut BucketCache,
        fused: Var,
        fused_spans: &[(usize, usize)],
        prefixes: &[&[u32]],
        last_only: bool,
    ) -> Result<Var> {
        let c = &self.config;
        let mut ids = Vec::new();
        let mut spans = Vec::with_capacity(prefixes.len());
        for p in prefixes {
            if p.len() > c.max_decode_len {
                return Err(Error::SequenceTooLong {
                    len: p.len(),
                    max: c.max_decode_len,
                });
            }
            spans.push((ids.len(), p.len()));
            ids.extend(p.iter().map(|&t| t as usize));
        }
        let table = self.p(g, self.h.embed);
        let mut x = g.embedding(table, &ids)?;
        for layer in &self.h.dec_layers {
            let layout = self.self_layout(cache, &spans, c.decoder_heads, true);
            let cross = Self::cross_layout(&spans, fused_spans, c.decoder_heads);
            x = self.layer(g, layer, x, layout, Some(self.h.dec_bias), Some((fused, cross)))?;
        }
        if last_only {
            let last: Vec<usize> = spans.iter().map(|&(s, l)| s + l - 1).collect();
            x = g.gather_rows(x, &last)?;
        }
        let x = self.norm(g, self.h.dec_norm, x)?;
        self.linear(g, self.h.out, x)
    }

    fn check_example(&self, images: &[Raster], input: &[u32], target: Option<&[u32]>) -> Result<()> {
        let c = &self.config;
        if images.is_empty() || images.len() > 2 {
            return Err(Error::ImageCount(images.len()));
        }
        if input.len() > c.max_text_len {
            return Err(Error::SequenceTooLong {
                len: input.len(),
                max: c.max_text_len,
            });
        }
        let ids = input.iter().chain(target.unwrap_or(&[]));
        if let Some(&bad) = ids.clone().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                size: c.vocab_size,
            });
        }
        if let Some(t) = target {
            if t.is_empty() {
                return Err(Error::EmptyLoss);
            }
            if t.len() > c.max_decode_len {
                return Err(Error::SequenceTooLong {
                    len: t.len(),
                    max: c.max_decode_len,
                });
            }
        }
        Ok(())
    }

    /// Encodes and fuses a batch of prompts on `g`.
    fn fused_batch(&self, g: &mut Graph, cache: &mut BucketCache, prompts: &[Prompt<'_>]) -> Result<(Var, Spans)> {
        let images: Vec<&Raster> = prompts.iter().flat_map(|p| p.images.iter()).collect();
        let pixels = g.constant(self.pixel_tensor(&images)?);
        let img = self.encode_images_on(g, pixels)?;
        let seqs: Vec<&[u32]> = prompts.iter().map(|p| p.input_ids).collect();
        let (text, text_spans) = self.encode_texts_on(g, cache, &seqs)?;
        let counts: Vec<usize> = prompts.iter().map(|p| p.images.len()).collect();
        self.fuse_on(g, cache, img, &counts, text, &text_spans)
    }

    // ----- training --------------------------------------------------------

    /// Builds the loss graph for a batch: token-level mean cross entropy over
    /// every target token (EOS included) under teacher forcing. Task tags
    /// are never read.
    pub fn loss_graph(&self, batch: &[EncodedExample]) -> Result<(Graph, Var)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for ex in batch {
            self.check_example(&ex.images, &ex.input_ids, Some(&ex.target_ids))?;
        }
        let mut g = Graph::new();
        let mut cache = BucketCache::default();
        let prompts: Vec<Prompt<'_>> = batch
            .iter()
            .map(|ex| Prompt {
                images: &ex.images,
                input_ids: &ex.input_ids,
            })
            .collect();
        let (fused, spans) = self.fused_batch(&mut g, &mut cache, &prompts)?;
        let prefixes: Vec<Vec<u32>> = batch.iter().map(|ex| shift_right(&ex.target_ids)).collect();
        let prefix_refs: Vec<&[u32]> = prefixes.iter().map(Vec::as_slice).collect();
        let logits = self.decode_on(&mut g, &mut cache, fused, &spans, &prefix_refs, false)?;
        let targets: Vec<usize> = batch
            .iter()
            .flat_map(|ex| ex.target_ids.iter().map(|&t| t as usize))
            .collect();
        let loss = g.softmax_cross_entropy(logits, &targets, PAD as usize)?;
        Ok((g, loss))
    }

    pub fn forward_loss(&self, batch: &[EncodedExample]) -> Result<f64> {
        let (g, loss) = self.loss_graph(batch)?;
        Ok(g.value(loss).item())
    }

    /// Teacher-forced logits `[T, V]` for one example.
    pub fn teacher_forced_logits(&self, ex: &EncodedExample) -> Result<Tensor> {
        self.check_example(&ex.images, &ex.input_ids, Some(&ex.target_ids))?;
        let mut g = Graph::new();
        let mut cache = BucketCache::default();
        let prompt = Prompt {
            images: &ex.images,
            input_ids: &ex.input_ids,
        };
        let (fused, spans) = self.fused_batch(&mut g, &mut cache, &[prompt])?;
        let prefix = shift_right(&ex.target_ids);
        let logits = self.decode_on(&mut g, &mut cache, fused, &spans, &[&prefix], false)?;
        Ok(g.value(logits).clone())
    }

    // ----- generation ------------------------------------------------------

    /// Greedy generation for a batch. Each step recomputes the decoder over
    /// the unfinished prefixes; finished examples drop out.
    pub fn generate(&self, prompts: &[Prompt<'_>], max_len: usize) -> Result<Vec<Vec<u32>>> {
        if prompts.is_empty() {
            return Ok(Vec::new());
        }
        for p in prompts {
            self.check_example(p.images, p.input_ids, None)?;
        }
        let (fused, spans) = {
            let mut g = Graph::new();
            let mut cache = BucketCache::default();
            let (f, s) = self.fused_batch(&mut g, &mut cache, prompts)?;
            (g.value(f).clone(), s)
        };
        self.generate_from(&fused, &spans, max_len)
    }

    fn generate_from(&self, fused: &Tensor, spans: &[(usize, usize)], max_len: usize) -> Result<Vec<Vec<u32>>> {
        let steps = max_len.min(self.config.max_decode_len);
        let mut outputs: Vec<Vec<u32>> = vec![Vec::new(); spans.len()];
        let mut prefixes: Vec<Vec<u32>> = vec![vec![PAD]; spans.len()];
        let mut active: Vec<usize> = (0..spans.len()).collect();
        let mut cache = BucketCache::default();
        for _ in 0..steps {
            if active.is_empty() {
                break;
            }
            let mut g = Graph::new();
            let f = g.constant(fused.clone());
            let act_spans: Vec<(usize, usize)> = active.iter().map(|&i| spans[i]).collect();
            let refs: Vec<&[u32]> = active.iter().map(|&i| prefixes[i].as_slice()).collect();
            let logits = self.decode_on(&mut g, &mut cache, f, &act_spans, &refs, true)?;
            let lt = g.value(logits);
            let mut still = Vec::with_capacity(active.len());
            for (r, &i) in active.iter().enumerate() {
                let next = argmax(lt.row(r));
                if next == EOS {
                    continue;
                }
                outputs[i].push(next);
                prefixes[i].push(next);
                still.push(i);
            }
            active = still;
        }
        Ok(outputs)
    }

    // ----- single-example surface ------------------------------------------

    pub fn encode_image(&self, image: &Raster) -> Result<FeatureGrid> {
        let mut g = Graph::new();
        let pixels = g.constant(self.pixel_tensor(&[image])?);
        let rows = self.encode_images_on(&mut g, pixels)?;
        let c = &self.config;
        let features = g
            .value(rows)
            .clone()
            .reshape(vec![c.grid_height(), c.grid_width(), c.d_model])?;
        Ok(FeatureGrid {
            features,
            image_id: None,
        })
    }

    /// Contextual features `[L, d]` of a token sequence (possibly empty).
    pub fn encode_text(&self, seq: &TokenSeq) -> Result<Tensor> {
        if let Some(&bad) = seq.ids().iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                size: self.config.vocab_size,
            });
        }
        let mut g = Graph::new();
        let mut cache = BucketCache::default();
        let (x, _) = self.encode_texts_on(&mut g, &mut cache, &[seq.ids()])?;
        Ok(g.value(x).clone())
    }

    fn fuse_inputs(&self, grids: &[&FeatureGrid], text: &Tensor) -> Result<(Graph, Var, Var, usize)> {
        let c = &self.config;
        if grids.is_empty() || grids.len() > 2 {
            return Err(Error::ImageCount(grids.len()));
        }
        let grid_shape = [c.grid_height(), c.grid_width(), c.d_model];
        let mut g = Graph::new();
        let mut rows = Vec::new();
        for grid in grids {
            if grid.features.shape() != grid_shape {
                return Err(Error::Shape {
                    op: "fuse",
                    lhs: grid.features.shape().to_vec(),
                    rhs: grid_shape.to_vec(),
                });
            }
            rows.extend_from_slice(grid.features.data());
        }
        if text.shape().len() != 2 || text.cols() != c.d_model {
            return Err(Error::Shape {
                op: "fuse",
                lhs: text.shape().to_vec(),
                rhs: vec![text.rows(), c.d_model],
            });
        }
        if text.rows() > c.max_text_len {
            return Err(Error::SequenceTooLong {
                len: text.rows(),
                max: c.max_text_len,
            });
        }
        let img = g.constant(Tensor::new(vec![grids.len() * c.grid_len(), c.d_model], rows)?);
        let txt = g.constant(text.clone());
        Ok((g, img, txt, grids.len()))
    }

    /// Concatenation fusion: `[image_1 | image_2? | text]` through the
    /// fusion layers.
    pub fn fuse(&self, grids: &[&FeatureGrid], text: &Tensor) -> Result<FusedSequence> {
        if self.config.fusion_kind != FusionKind::ConcatEncoder {
            return Err(Error::WrongFusion {
                op: "fuse",
                expected: FusionKind::ConcatEncoder.name(),
            });
        }
        self.fuse_any(grids, text)
    }

    /// Encoder/decoder fusion: text queries attend to image keys/values.
    pub fn fuse_xattn(&self, grids: &[&FeatureGrid], text: &Tensor) -> Result<FusedSequence> {
        if self.config.fusion_kind != FusionKind::EncoderDecoder {
            return Err(Error::WrongFusion {
                op: "fuse_xattn",
                expected: FusionKind::EncoderDecoder.name(),
            });
        }
        self.fuse_any(grids, text)
    }

    fn fuse_any(&self, grids: &[&FeatureGrid], text: &Tensor) -> Result<FusedSequence> {
        let (mut g, img, txt, n_img) = self.fuse_inputs(grids, text)?;
        let mut cache = BucketCache::default();
        let l = text.rows();
        let (x, _) = self.fuse_on(&mut g, &mut cache, img, &[n_img], txt, &[(0, l)])?;
        let segments = match self.config.fusion_kind {
            FusionKind::ConcatEncoder => fused_buckets(&self.config).segments(n_img, l),
            FusionKind::EncoderDecoder => vec![Segment::Text; l],
        };
        Ok(FusedSequence {
            features: g.value(x).clone(),
            segments,
        })
    }

    /// Next-token logits `[V]` after `prefix` (decoding starts from PAD).
    pub fn decode_step(&self, fused: &FusedSequence, prefix: &TokenSeq) -> Result<Tensor> {
        if prefix.len() >= self.config.max_decode_len {
            return Err(Error::SequenceTooLong {
                len: prefix.len() + 1,
                max: self.config.max_decode_len,
            });
        }
        self.check_fused(fused)?;
        let mut ids = vec![PAD];
        ids.extend_from_slice(prefix.ids());
        let mut g = Graph::new();
        let mut cache = BucketCache::default();
        let f = g.constant(fused.features.clone());
        let logits = self.decode_on(&mut g, &mut cache, f, &[(0, fused.len())], &[&ids], true)?;
        let v = self.config.vocab_size;
        g.value(logits).clone().reshape(vec![v])
    }

    /// Greedy decoding, lowest id on ties, stopping at EOS (not emitted) or
    /// after `max_len` tokens.
    pub fn generate_greedy(&self, fused: &FusedSequence, max_len: usize) -> Result<TokenSeq> {
        self.check_fused(fused)?;
        let out = self.generate_from(&fused.features, &[(0, fused.len())], max_len)?;
        Ok(TokenSeq::from_raw(out.into_iter().next().unwrap_or_default()))
    }

    fn check_fused(&self, fused: &FusedSequence) -> Result<()> {
        let f = &fused.features;
        if f.shape().len() != 2 || f.cols() != self.config.d_model || f.rows() != fused.segments.len() {
            return Err(Error::Shape {
                op: "decode",
                lhs: f.shape().to_vec(),
                rhs: vec![fused.segments.len(), self.config.d_model],
            });
        }
        Ok(())
    }
}

fn fused_buckets(c: &ModelConfig) -> FusedBuckets {
    FusedBuckets {
        grid_h: c.grid_height(),
        grid_w: c.grid_width(),
        text_buckets: c.text_buckets,
        max_distance: c.max_distance,
    }
}

/// Decoder input for teacher forcing: PAD followed by all but the last
/// target token.
fn shift_right(target: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(target.len());
    v.push(PAD);
    v.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    v
}

/// Index of the largest value; the first (lowest id) wins ties.
pub fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}
