//! Parameter storage, initialization, and the full forward pass: encoder,
//! difference module and decoder bound into one graph.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::decoder::{
    decode_teacher_forced, greedy_decode, vocab_scores, Decoded, DecoderLayerWeights,
    DecoderWeights,
};
use crate::difference::{difference_features, fuse_difference, shared_features, AttentionWeights};
use crate::encoder::{
    correlation_matrix, correlation_samples, mlp_head, project_embed, CorrelationSamples,
    EncoderWeights,
};
use crate::error::{Error, Result};
use crate::layers::{Dropout, LayerNorm, Linear};
use crate::scenes::FeatureGrid;
use crate::tensor::Tensor;

/// Architecture hyperparameters, including the data-dependent extents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_channels: usize,
    pub positions: usize,
    pub vocab_size: usize,
    pub d_model: usize,
    pub word_dim: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    /// Two-layer head before the correlation; off makes it the identity.
    pub mlp: bool,
    /// One attention parameter set for both directions of the shared-feature step.
    pub tied_attention: bool,
    /// Replace cross-attended shared features by the opposite image's features.
    pub subtraction: bool,
    pub correlation: CorrelationSamples,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_channels", self.feature_channels),
            ("positions", self.positions),
            ("d_model", self.d_model),
            ("word_dim", self.word_dim),
            ("heads", self.heads),
            ("decoder_layers", self.decoder_layers),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide d_model {}",
                self.heads, self.d_model
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config(format!(
                "max_len must be >= 2, got {}",
                self.max_len
            )));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config(format!(
                "vocabulary of {} tokens is too small",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Deterministic initialization: linear weights uniform in ±1/√fan_in,
    /// biases zero, position tables N(0, 0.02²), word table N(0, 1), layer
    /// norms at unit gain and zero bias.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::default();
        let (c, d, dw, v) = (
            self.feature_channels,
            self.d_model,
            self.word_dim,
            self.vocab_size,
        );
        let dk = d / self.heads;
        let hidden = self.ffn_mult * d;

        linear(&mut p, &mut rng, "enc.proj", c, d);
        p.insert("enc.pos", normal(&[self.positions, d], 0.02, &mut rng));
        linear(&mut p, &mut rng, "enc.mlp1", d, d);
        linear(&mut p, &mut rng, "enc.mlp2", d, d);
        attention(&mut p, &mut rng, "diff.attn", d, dk, self.heads);
        if !self.tied_attention {
            attention(&mut p, &mut rng, "diff.attn_aft", d, dk, self.heads);
        }
        linear(&mut p, &mut rng, "diff.fuse", 2 * d, d);

        p.insert("dec.embed", normal(&[v, dw], 1.0, &mut rng));
        linear(&mut p, &mut rng, "dec.word", dw, d);
        p.insert("dec.pos", normal(&[self.max_len, d], 0.02, &mut rng));
        for l in 0..self.decoder_layers {
            attention(
                &mut p,
                &mut rng,
                &format!("dec.{l}.self"),
                d,
                dk,
                self.heads,
            );
            attention(
                &mut p,
                &mut rng,
                &format!("dec.{l}.cross"),
                d,
                dk,
                self.heads,
            );
            linear(&mut p, &mut rng, &format!("dec.{l}.ffn1"), d, hidden);
            linear(&mut p, &mut rng, &format!("dec.{l}.ffn2"), hidden, d);
            for k in 1..=3 {
                p.insert(&format!("dec.{l}.ln{k}.gain"), Tensor::full(vec![d], 1.0));
                p.insert(&format!("dec.{l}.ln{k}.bias"), Tensor::zeros(vec![d]));
            }
        }
        linear(&mut p, &mut rng, "dec.out", d, v);
        Ok(p)
    }
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .expect("shape")
}

fn normal(shape: &[usize], sigma: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = if sigma == 1.0 {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    } else {
        let dist = Normal::new(0.0, sigma).expect("sigma > 0");
        (0..n).map(|_| dist.sample(rng)).collect()
    };
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn linear(p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
    p.insert(
        &format!("{name}.w"),
        uniform(&[fan_in, fan_out], fan_in, rng),
    );
    p.insert(&format!("{name}.b"), Tensor::zeros(vec![fan_out]));
}

fn attention(
    p: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    d: usize,
    dk: usize,
    heads: usize,
) {
    for h in 0..heads {
        for part in ["q", "k", "v"] {
            p.insert(&format!("{name}.{part}.{h}"), uniform(&[d, dk], d, rng));
        }
    }
    p.insert(&format!("{name}.o"), uniform(&[d, d], d, rng));
}

/// Named parameter tensors in a fixed insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.values[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Parameters placed in a graph, grouped by module.
#[derive(Debug, Clone)]
pub struct BoundModel {
    /// One graph variable per stored parameter, in store order.
    pub vars: Vec<Var>,
    pub encoder: EncoderWeights,
    pub attend_bef: AttentionWeights,
    pub attend_aft: AttentionWeights,
    pub fuse: Linear,
    pub decoder: DecoderWeights,
}

impl BoundModel {
    /// Adds every parameter as a leaf; `trainable` decides whether the
    /// leaves collect gradients.
    pub fn bind(
        g: &mut Graph,
        params: &ParamStore,
        config: &ModelConfig,
        trainable: bool,
    ) -> Result<Self> {
        let vars: Vec<Var> = params
            .values
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect();
        Self::assemble(vars, params.names(), config)
    }

    /// Groups variables already on a graph, one per name in `names`, into
    /// module weights.
    pub fn assemble(vars: Vec<Var>, names: &[String], config: &ModelConfig) -> Result<Self> {
        if vars.len() != names.len() {
            return Err(Error::Contract(format!(
                "{} variables for {} parameter names",
                vars.len(),
                names.len()
            )));
        }
        let index: HashMap<&str, Var> = names
            .iter()
            .map(String::as_str)
            .zip(vars.iter().copied())
            .collect();
        let get = |name: &str| -> Result<Var> {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::State(format!("missing parameter {name}")))
        };
        let lin = |name: &str| -> Result<Linear> {
            Ok(Linear::new(
                get(&format!("{name}.w"))?,
                Some(get(&format!("{name}.b"))?),
            ))
        };
        let attn = |name: &str| -> Result<AttentionWeights> {
            let part = |p: &str| {
                (0..config.heads)
                    .map(|h| get(&format!("{name}.{p}.{h}")))
                    .collect::<Result<Vec<_>>>()
            };
            Ok(AttentionWeights {
                query: part("q")?,
                key: part("k")?,
                value: part("v")?,
                output: get(&format!("{name}.o"))?,
            })
        };
        let encoder = EncoderWeights {
            proj: lin("enc.proj")?,
            pos: get("enc.pos")?,
            mlp: if config.mlp {
                Some((lin("enc.mlp1")?, lin("enc.mlp2")?))
            } else {
                None
            },
        };
        let attend_bef = attn("diff.attn")?;
        let attend_aft = if config.tied_attention {
            attend_bef.clone()
        } else {
            attn("diff.attn_aft")?
        };
        let ln = |name: &str| -> Result<LayerNorm> {
            Ok(LayerNorm {
                gain: get(&format!("{name}.gain"))?,
                bias: get(&format!("{name}.bias"))?,
            })
        };
        let layers = (0..config.decoder_layers)
            .map(|l| {
                Ok(DecoderLayerWeights {
                    self_attn: attn(&format!("dec.{l}.self"))?,
                    cross_attn: attn(&format!("dec.{l}.cross"))?,
                    ffn1: lin(&format!("dec.{l}.ffn1"))?,
                    ffn2: lin(&format!("dec.{l}.ffn2"))?,
                    ln1: ln(&format!("dec.{l}.ln1"))?,
                    ln2: ln(&format!("dec.{l}.ln2"))?,
                    ln3: ln(&format!("dec.{l}.ln3"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = DecoderWeights {
            embed: get("dec.embed")?,
            word: lin("dec.word")?,
            pos: get("dec.pos")?,
            layers,
            out: lin("dec.out")?,
        };
        Ok(Self {
            vars,
            encoder,
            attend_bef,
            attend_aft,
            fuse: lin("diff.fuse")?,
            decoder,
        })
    }
}

/// Stacks grids into a `(B, H·W, C)` tensor.
pub fn stack_grids<'a>(grids: impl IntoIterator<Item = &'a FeatureGrid>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut count = 0;
    for grid in grids {
        let d = (grid.positions(), grid.channels);
        if *dims.get_or_insert(d) != d {
            return Err(Error::dim(
                "stack_grids",
                &[d.0, d.1],
                &[dims.unwrap().0, dims.unwrap().1],
            ));
        }
        data.extend(grid.values.iter().map(|&v| f64::from(v)));
        count += 1;
    }
    let (hw, c) = dims.ok_or_else(|| Error::Contract("no grids to stack".into()))?;
    Tensor::new(vec![count, hw, c], data)
}

/// Encoder outputs for a batch of pairs.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `(B, HW, D)` position-embedded projections.
    pub f_bef: Var,
    pub f_aft: Var,
    /// `D × D` channel correlation of the head outputs.
    pub correlation: Var,
    /// `(B, HW, D)` fused difference features.
    pub diff: Var,
}

pub fn encode_pair(
    g: &mut Graph,
    m: &BoundModel,
    config: &ModelConfig,
    before: Var,
    after: Var,
) -> Result<Encoded> {
    let f_bef = project_embed(g, before, &m.encoder)?;
    let f_aft = project_embed(g, after, &m.encoder)?;
    let y_bef = mlp_head(g, f_bef, &m.encoder)?;
    let y_aft = mlp_head(g, f_aft, &m.encoder)?;
    let y_bef = correlation_samples(g, y_bef, config.correlation)?;
    let y_aft = correlation_samples(g, y_aft, config.correlation)?;
    let correlation = correlation_matrix(g, y_bef, y_aft)?;
    let (s_bef, s_aft) = if config.subtraction {
        (f_aft, f_bef)
    } else {
        shared_features(g, f_bef, f_aft, &m.attend_bef, &m.attend_aft)?
    };
    let d_bef = difference_features(g, f_bef, s_bef)?;
    let d_aft = difference_features(g, f_aft, s_aft)?;
    let diff = fuse_difference(g, d_bef, d_aft, &m.fuse)?;
    Ok(Encoded {
        f_bef,
        f_aft,
        correlation,
        diff,
    })
}

/// Graph outputs of a teacher-forced pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub encoded: Encoded,
    /// `(B, m, vocab)` unnormalized scores.
    pub scores: Var,
    /// Final decoder layer's self-attended words, `(B, m, D)`.
    pub words: Var,
    /// Final decoder layer's cross-attended words, `(B, m, D)`.
    pub attended: Var,
}

pub fn forward(
    g: &mut Graph,
    m: &BoundModel,
    config: &ModelConfig,
    before: Var,
    after: Var,
    input_ids: &[usize],
    dropout: &mut Dropout,
) -> Result<Forward> {
    let batch = g.shape(before)[0];
    let encoded = encode_pair(g, m, config, before, after)?;
    let state = decode_teacher_forced(g, input_ids, batch, encoded.diff, &m.decoder, dropout)?;
    let scores = vocab_scores(g, state.output, &m.decoder)?;
    Ok(Forward {
        encoded,
        scores,
        words: state.words,
        attended: state.attended,
    })
}

/// Greedy captions for a batch of before/after grids.
pub fn caption_batch(
    params: &ParamStore,
    config: &ModelConfig,
    before: &[&FeatureGrid],
    after: &[&FeatureGrid],
) -> Result<Vec<Decoded>> {
    if before.len() != after.len() {
        return Err(Error::dim("caption_batch", &[before.len()], &[after.len()]));
    }
    for grid in before.iter().chain(after) {
        if grid.positions() != config.positions || grid.channels != config.feature_channels {
            return Err(Error::dim(
                "caption_batch",
                &[grid.positions(), grid.channels],
                &[config.positions, config.feature_channels],
            ));
        }
    }
    let mut g = Graph::new();
    let m = BoundModel::bind(&mut g, params, config, false)?;
    let b = g.constant(stack_grids(before.iter().copied())?);
    let a = g.constant(stack_grids(after.iter().copied())?);
    let enc = encode_pair(&mut g, &m, config, b, a)?;
    greedy_decode(&mut g, enc.diff, config.max_len, &m.decoder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{BOS, EOS};

    fn tiny() -> ModelConfig {
        ModelConfig {
            feature_channels: 5,
            positions: 4,
            vocab_size: 11,
            d_model: 8,
            word_dim: 6,
            heads: 2,
            decoder_layers: 2,
            ffn_mult: 4,
            max_len: 8,
            mlp: true,
            tied_attention: true,
            subtraction: false,
            correlation: CorrelationSamples::Flattened,
        }
    }

    #[test]
    fn init_is_deterministic_and_named() {
        let c = tiny();
        let a = c.init(3).unwrap();
        assert_eq!(a, c.init(3).unwrap());
        assert_ne!(a, c.init(4).unwrap());
        assert_eq!(a.get("enc.proj.w").unwrap().shape(), &[5, 8]);
        assert_eq!(a.get("dec.1.ln3.gain").unwrap().data(), &[1.0; 8]);
        assert!(a.get("diff.attn_aft.o").is_none());
        let untied = ModelConfig {
            tied_attention: false,
            ..c
        };
        assert!(untied.init(3).unwrap().get("diff.attn_aft.q.1").is_some());
    }

    #[test]
    fn validation() {
        let bad = ModelConfig { heads: 3, ..tiny() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(matches!(
            ModelConfig {
                max_len: 1,
                ..tiny()
            }
            .validate(),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn forward_shapes_and_captioning() {
        let c = tiny();
        let p = c.init(1).unwrap();
        let mut g = Graph::new();
        let m = BoundModel::bind(&mut g, &p, &c, true).unwrap();
        let grid = |s: f32| {
            FeatureGrid::new(2, 2, 5, (0..20).map(|i| (i as f32 * s).sin()).collect()).unwrap()
        };
        let (b1, a1, b2, a2) = (grid(0.3), grid(0.7), grid(1.1), grid(0.2));
        let before = g.constant(stack_grids([&b1, &b2]).unwrap());
        let after = g.constant(stack_grids([&a1, &a2]).unwrap());
        let f = forward(
            &mut g,
            &m,
            &c,
            before,
            after,
            &[BOS, 4, 5, BOS, 6, 0],
            &mut Dropout::off(),
        )
        .unwrap();
        assert_eq!(g.shape(f.scores), &[2, 3, 11]);
        assert_eq!(g.shape(f.encoded.correlation), &[8, 8]);
        assert_eq!(g.shape(f.encoded.diff), &[2, 4, 8]);
        assert!(g.value(f.encoded.diff).data().iter().all(|&v| v >= 0.0));

        let out = caption_batch(&p, &c, &[&b1, &b2], &[&a1, &a2]).unwrap();
        assert_eq!(out.len(), 2);
        for d in &out {
            assert_eq!(d.tokens.ids[0], BOS);
            assert!(d.tokens.len() <= c.max_len);
            assert_eq!(d.tokens.truncated, *d.tokens.ids.last().unwrap() != EOS);
        }
        let wrong = FeatureGrid::new(2, 2, 3, vec![0.5; 12]).unwrap();
        assert!(matches!(
            caption_batch(&p, &c, &[&wrong], &[&wrong]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn subtraction_baseline_is_antisymmetric_before_fusion() {
        let c = ModelConfig {
            subtraction: true,
            ..tiny()
        };
        let p = c.init(2).unwrap();
        let mut g = Graph::new();
        let m = BoundModel::bind(&mut g, &p, &c, false).unwrap();
        let x = FeatureGrid::new(2, 2, 5, (0..20).map(|i| i as f32 / 7.0).collect()).unwrap();
        let t = g.constant(stack_grids([&x]).unwrap());
        let enc = encode_pair(&mut g, &m, &c, t, t).unwrap();
        // identical inputs: both differences vanish and only relu(b_c) = 0 remains
        assert!(g.value(enc.diff).data().iter().all(|&v| v == 0.0));
    }
}
