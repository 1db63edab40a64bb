//! Joint objective and the training loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::ccr::{infonce_ccr, l2_normalize_rows, mean_pool_words, similarity_matrix};
use crate::checkpoint::Checkpoint;
use crate::config::{CaptionNorm, TrainConfig};
use crate::dataset::Example;
use crate::encoder::{correlation_summary, dirl_loss};
use crate::error::{Error, Result};
use crate::layers::{log_softmax, Dropout};
use crate::model::{forward, BoundModel, ModelConfig, ParamStore};
use crate::optim::{clip_global_norm, Adam};
use crate::scenes::splitmix64;
use crate::tensor::Tensor;
use crate::vocab::{Vocab, PAD};

/// Negative log-likelihood of `targets` under `scores` (`(B, m, vocab)`,
/// unnormalized). PAD targets contribute nothing.
pub fn caption_loss(
    g: &mut Graph,
    scores: Var,
    targets: &[usize],
    norm: CaptionNorm,
) -> Result<Var> {
    let shape = g.shape(scores).to_vec();
    let vocab = *shape.last().expect("rank >= 1");
    let rows = g.value(scores).numel() / vocab;
    if targets.len() != rows {
        return Err(Error::dim("caption_loss", &shape, &[targets.len()]));
    }
    let real = targets.iter().filter(|&&t| t != PAD).count();
    if real == 0 {
        return Err(Error::Contract(
            "caption loss over zero unmasked tokens".into(),
        ));
    }
    let mut pick = vec![0.0; rows * vocab];
    for (r, &t) in targets.iter().enumerate() {
        if t >= vocab {
            return Err(Error::Index {
                index: t,
                extent: vocab,
            });
        }
        if t != PAD {
            pick[r * vocab + t] = 1.0;
        }
    }
    let pick = g.constant(Tensor::new(shape.clone(), pick)?);
    let logp = log_softmax(g, scores)?;
    let picked = g.mul(logp, pick)?;
    let sum = g.sum_all(picked)?;
    let divisor = match norm {
        CaptionNorm::PerToken => real as f64,
        // one sequence per row of the second-to-last axis
        CaptionNorm::PerSequence => (rows / sequence_len(&shape)) as f64,
    };
    g.scale(sum, -1.0 / divisor)
}

fn sequence_len(shape: &[usize]) -> usize {
    if shape.len() >= 2 {
        shape[shape.len() - 2]
    } else {
        1
    }
}

/// `L_cap + λ_d·L_dirl + λ_c·L_ccr`; absent terms count as zero.
pub fn total_loss(
    g: &mut Graph,
    cap: Var,
    dirl: Option<Var>,
    ccr: Option<Var>,
    lambda_d: f64,
    lambda_c: f64,
) -> Result<Var> {
    if lambda_d < 0.0 || lambda_c < 0.0 {
        return Err(Error::Contract(format!(
            "loss weights must be >= 0, got {lambda_d}, {lambda_c}"
        )));
    }
    let mut total = cap;
    for (term, weight) in [(dirl, lambda_d), (ccr, lambda_c)] {
        if let Some(t) = term {
            let t = g.scale(t, weight)?;
            total = g.add(total, t)?;
        }
    }
    Ok(total)
}

/// Grids and token ids ready for batching.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub positions: usize,
    pub channels: usize,
    before: Vec<Vec<f64>>,
    after: Vec<Vec<f64>>,
    tokens: Vec<Vec<usize>>,
}

impl TrainingData {
    pub fn new(examples: &[Example], vocab: &Vocab, max_len: usize) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::Contract("training set is empty".into()))?;
        let (positions, channels) = (first.before.positions(), first.before.channels);
        let mut data = Self {
            positions,
            channels,
            before: Vec::with_capacity(examples.len()),
            after: Vec::with_capacity(examples.len()),
            tokens: Vec::with_capacity(examples.len()),
        };
        for (i, ex) in examples.iter().enumerate() {
            for grid in [&ex.before, &ex.after] {
                if grid.positions() != positions || grid.channels != channels {
                    return Err(Error::dim(
                        "training example",
                        &[grid.positions(), grid.channels],
                        &[positions, channels],
                    ));
                }
            }
            let seq = vocab.encode(&ex.caption);
            if seq.len() > max_len {
                return Err(Error::Contract(format!(
                    "example {i}: caption of {} tokens exceeds max_len {max_len}",
                    seq.len()
                )));
            }
            data.before
                .push(ex.before.values.iter().map(|&v| f64::from(v)).collect());
            data.after
                .push(ex.after.values.iter().map(|&v| f64::from(v)).collect());
            data.tokens.push(seq.ids);
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Stacks the given examples. Sequences are padded to the longest one;
    /// inputs drop the last position and targets drop the first.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let len = indices
            .iter()
            .map(|&i| self.tokens[i].len())
            .max()
            .unwrap_or(2);
        let stack = |src: &Vec<Vec<f64>>| {
            let data = indices
                .iter()
                .flat_map(|&i| src[i].iter().copied())
                .collect();
            Tensor::new(vec![indices.len(), self.positions, self.channels], data)
                .expect("batch shape")
        };
        let mut inputs = Vec::with_capacity(indices.len() * (len - 1));
        let mut targets = Vec::with_capacity(indices.len() * (len - 1));
        for &i in indices {
            let mut ids = self.tokens[i].clone();
            ids.resize(len, PAD);
            inputs.extend_from_slice(&ids[..len - 1]);
            targets.extend_from_slice(&ids[1..]);
        }
        Batch {
            before: stack(&self.before),
            after: stack(&self.after),
            inputs,
            targets,
            size: indices.len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, HW, C)`.
    pub before: Tensor,
    pub after: Tensor,
    /// `(B, m)` teacher-forced inputs, row-major.
    pub inputs: Vec<usize>,
    /// `(B, m)` next-token targets.
    pub targets: Vec<usize>,
    pub size: usize,
}

/// Graph nodes of every loss term for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub cap: Var,
    pub dirl: Option<Var>,
    pub ccr: Option<Var>,
    pub total: Var,
    pub correlation: Var,
}

/// Builds the full forward pass and all losses for one batch on parameters
/// already bound into `g`.
pub fn joint_loss(
    g: &mut Graph,
    bound: &BoundModel,
    model: &ModelConfig,
    config: &TrainConfig,
    batch: &Batch,
    dropout: &mut Dropout,
) -> Result<LossTerms> {
    let before = g.constant(batch.before.clone());
    let after = g.constant(batch.after.clone());
    let f = forward(g, bound, model, before, after, &batch.inputs, dropout)?;
    let cap = caption_loss(g, f.scores, &batch.targets, config.caption_norm)?;
    let dirl = if config.dirl {
        Some(dirl_loss(g, f.encoded.correlation, config.alpha)?)
    } else {
        None
    };
    let ccr = if config.ccr && batch.size >= 2 {
        let mask: Vec<bool> = batch.inputs.iter().map(|&t| t != PAD).collect();
        let mut words = mean_pool_words(g, f.words, &mask)?;
        let mut visual = mean_pool_words(g, f.attended, &mask)?;
        if config.cosine_similarity {
            words = l2_normalize_rows(g, words)?;
            visual = l2_normalize_rows(g, visual)?;
        }
        let s = similarity_matrix(g, words, visual)?;
        Some(infonce_ccr(g, s, config.tau)?)
    } else {
        None
    };
    let total = total_loss(g, cap, dirl, ccr, config.lambda_d, config.lambda_c)?;
    Ok(LossTerms {
        cap,
        dirl,
        ccr,
        total,
        correlation: f.encoded.correlation,
    })
}

/// One line of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: u64,
    pub l_cap: f64,
    pub l_dirl: f64,
    pub l_ccr: f64,
    pub total: f64,
    pub diag_mean: f64,
    pub offdiag_mean: f64,
}

/// Owns the parameters and optimizer state for one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub adam: Adam,
    /// Number of completed steps.
    pub iteration: u64,
    /// Non-fatal notices (e.g. a disabled loss term).
    pub warnings: Vec<String>,
}

impl Trainer {
    /// Fresh parameters for `config`, with the vocabulary built from
    /// `examples` and data extents taken from its first grid.
    pub fn new(config: TrainConfig, examples: &[Example]) -> Result<Self> {
        config.validate()?;
        let first = examples
            .first()
            .ok_or_else(|| Error::Contract("training set is empty".into()))?;
        let vocab = Vocab::build(examples.iter().map(|e| &e.caption))?;
        let model = ModelConfig {
            feature_channels: first.before.channels,
            positions: first.before.positions(),
            vocab_size: vocab.len(),
            d_model: config.d_model,
            word_dim: config.word_dim,
            heads: config.heads,
            decoder_layers: config.decoder_layers,
            ffn_mult: 4,
            max_len: config.max_len,
            mlp: config.mlp,
            tied_attention: config.tied_attention,
            subtraction: config.subtraction,
            correlation: config.correlation,
        };
        let params = model.init(config.seed)?;
        let adam = Adam::new(&params);
        let mut warnings = Vec::new();
        if config.ccr && config.batch_size < 2 {
            warnings.push("batch_size < 2: contrastive loss disabled".to_string());
        }
        Ok(Self {
            config,
            model,
            vocab,
            params,
            adam,
            iteration: 0,
            warnings,
        })
    }

    pub fn prepare(&self, examples: &[Example]) -> Result<TrainingData> {
        let data = TrainingData::new(examples, &self.vocab, self.model.max_len)?;
        if data.positions != self.model.positions || data.channels != self.model.feature_channels {
            return Err(Error::dim(
                "training data",
                &[data.positions, data.channels],
                &[self.model.positions, self.model.feature_channels],
            ));
        }
        Ok(data)
    }

    /// Example indices of iteration `iteration`: a pure function of the run
    /// seed and the iteration, so a resumed run sees the same batches.
    pub fn batch_indices(&self, iteration: u64, n: usize) -> Vec<usize> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(splitmix64(self.config.seed ^ splitmix64(iteration)));
        rand::seq::index::sample(&mut rng, n, self.config.batch_size.min(n)).into_vec()
    }

    /// Loss terms at the current parameters without updating them.
    pub fn evaluate_losses(&self, batch: &Batch) -> Result<TraceRecord> {
        let mut g = Graph::new();
        let bound = BoundModel::bind(&mut g, &self.params, &self.model, false)?;
        let terms = joint_loss(
            &mut g,
            &bound,
            &self.model,
            &self.config,
            batch,
            &mut Dropout::off(),
        )?;
        Ok(self.record(&g, &terms))
    }

    fn record(&self, g: &Graph, t: &LossTerms) -> TraceRecord {
        let scalar = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0]);
        let (diag_mean, offdiag_mean) = correlation_summary(g.value(t.correlation));
        TraceRecord {
            iteration: self.iteration,
            l_cap: scalar(Some(t.cap)),
            l_dirl: scalar(t.dirl),
            l_ccr: scalar(t.ccr),
            total: scalar(Some(t.total)),
            diag_mean,
            offdiag_mean,
        }
    }

    /// One optimization step on the deterministic batch of the current
    /// iteration. On error the parameters are left untouched.
    pub fn step(&mut self, data: &TrainingData) -> Result<TraceRecord> {
        let indices = self.batch_indices(self.iteration, data.len());
        let batch = data.batch(&indices);
        let mut g = Graph::new();
        let bound = BoundModel::bind(&mut g, &self.params, &self.model, true)?;
        let mut dropout = Dropout::new(
            self.config.dropout,
            splitmix64(self.config.seed.wrapping_add(self.iteration)),
        );
        let terms = joint_loss(
            &mut g,
            &bound,
            &self.model,
            &self.config,
            &batch,
            &mut dropout,
        )?;
        let record = self.record(&g, &terms);
        g.backward(terms.total)?;
        let mut grads: Vec<Tensor> = bound
            .vars
            .iter()
            .map(|&v| g.grad(v).expect("trainable leaf"))
            .collect();
        if self.config.clip_norm > 0.0 {
            clip_global_norm(&mut grads, self.config.clip_norm);
        }
        self.adam
            .step(&mut self.params, &grads, self.config.learning_rate)?;
        self.iteration += 1;
        Ok(record)
    }

    /// Steps until `max_iters`, handing each record to `on_record`.
    pub fn run(
        &mut self,
        data: &TrainingData,
        mut on_record: impl FnMut(&Self, &TraceRecord) -> Result<()>,
    ) -> Result<()> {
        while self.iteration < self.config.max_iters {
            let r = self.step(data)?;
            on_record(self, &r)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            iteration: self.iteration,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        Ok(Self {
            config: ckpt.config,
            model: ckpt.model,
            vocab: ckpt.vocab,
            params: ckpt.params,
            adam: ckpt.adam,
            iteration: ckpt.iteration,
            warnings: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::DatasetSpec;

    fn one_hot_scores(targets: &[usize], vocab: usize, hit: f64) -> Tensor {
        let mut data = vec![0.0; targets.len() * vocab];
        for (r, &t) in targets.iter().enumerate() {
            data[r * vocab + t] = hit;
        }
        Tensor::new(vec![1, targets.len(), vocab], data).unwrap()
    }

    fn cap(scores: Tensor, targets: &[usize], norm: CaptionNorm) -> Result<f64> {
        let mut g = Graph::new();
        let s = g.constant(scores);
        let l = caption_loss(&mut g, s, targets, norm)?;
        Ok(g.value(l).data()[0])
    }

    #[test]
    fn caption_loss_cases() {
        // a score gap of 800 makes the target probability 1 in double precision
        assert_eq!(
            cap(
                one_hot_scores(&[4, 5, 2], 7, 800.0),
                &[4, 5, 2],
                CaptionNorm::PerToken
            )
            .unwrap(),
            0.0
        );
        let uniform = cap(
            Tensor::zeros(vec![1, 3, 7]),
            &[4, 5, 2],
            CaptionNorm::PerToken,
        )
        .unwrap();
        assert!((uniform - 7f64.ln()).abs() < 1e-12);
        let half = cap(Tensor::zeros(vec![1, 1, 2]), &[1], CaptionNorm::PerToken).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
        // PAD targets are ignored
        let padded = cap(
            Tensor::zeros(vec![1, 4, 7]),
            &[4, 5, 0, 0],
            CaptionNorm::PerToken,
        )
        .unwrap();
        assert!((padded - 7f64.ln()).abs() < 1e-12);
        // per-sequence sums: two real tokens in one sequence
        let seq = cap(
            Tensor::zeros(vec![1, 4, 7]),
            &[4, 5, 0, 0],
            CaptionNorm::PerSequence,
        )
        .unwrap();
        assert!((seq - 2.0 * 7f64.ln()).abs() < 1e-12);
        assert!(matches!(
            cap(Tensor::zeros(vec![1, 2, 7]), &[0, 0], CaptionNorm::PerToken),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn total_loss_is_linear_in_weights() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(1.5));
        let d = g.constant(Tensor::scalar(2.0));
        let r = g.constant(Tensor::scalar(4.0));
        let t = total_loss(&mut g, c, Some(d), Some(r), 0.0, 0.0).unwrap();
        assert_eq!(g.value(t).data()[0], 1.5);
        let t = total_loss(&mut g, c, Some(d), Some(r), 0.03, 0.05).unwrap();
        assert!((g.value(t).data()[0] - (1.5 + 0.06 + 0.2)).abs() < 1e-15);
        assert!(total_loss(&mut g, c, None, None, -1.0, 0.0).is_err());
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            d_model: 8,
            word_dim: 6,
            heads: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            max_iters: 3,
            ..TrainConfig::preset("synthetic").unwrap()
        }
    }

    fn tiny_examples() -> Vec<Example> {
        let mut spec = DatasetSpec::preset("synthetic", 10, 5).unwrap();
        spec.generator.channels = 6;
        spec.generator.grid_size = 3;
        spec.generator.max_objects = 4;
        crate::dataset::generate(&spec).unwrap()
    }

    #[test]
    fn batches_shift_targets() {
        let ex = tiny_examples();
        let t = Trainer::new(tiny_config(), &ex).unwrap();
        let data = t.prepare(&ex).unwrap();
        let b = data.batch(&[0, 4]);
        assert_eq!(b.before.shape(), &[2, 9, 6]);
        let m = b.inputs.len() / 2;
        assert_eq!(&b.inputs[1..m], &b.targets[..m - 1]);
        assert_eq!(b.inputs[0], crate::vocab::BOS);
        assert_eq!(t.batch_indices(7, 10), t.batch_indices(7, 10));
        assert_ne!(t.batch_indices(7, 10), t.batch_indices(8, 10));
    }

    #[test]
    fn dirl_off_zeroes_the_trace_column() {
        let ex = tiny_examples();
        let cfg = TrainConfig {
            dirl: false,
            ..tiny_config()
        };
        let mut t = Trainer::new(cfg, &ex).unwrap();
        let data = t.prepare(&ex).unwrap();
        for _ in 0..2 {
            let r = t.step(&data).unwrap();
            assert_eq!(r.l_dirl, 0.0);
            assert!(r.l_ccr > 0.0);
        }
    }

    #[test]
    fn single_sample_batches_disable_ccr() {
        let ex = tiny_examples();
        let cfg = TrainConfig {
            batch_size: 1,
            ..tiny_config()
        };
        let mut t = Trainer::new(cfg, &ex).unwrap();
        assert_eq!(t.warnings.len(), 1);
        let data = t.prepare(&ex).unwrap();
        assert_eq!(t.step(&data).unwrap().l_ccr, 0.0);
    }

    #[test]
    fn doubling_lambda_d_doubles_its_contribution() {
        let ex = tiny_examples();
        let t = Trainer::new(tiny_config(), &ex).unwrap();
        let data = t.prepare(&ex).unwrap();
        let batch = data.batch(&[0, 1, 2, 3]);
        let base = t.evaluate_losses(&batch).unwrap();
        let mut t2 = t.clone();
        t2.config.lambda_d *= 2.0;
        let doubled = t2.evaluate_losses(&batch).unwrap();
        let contribution = base.total - base.l_cap - t.config.lambda_c * base.l_ccr;
        let contribution2 = doubled.total - doubled.l_cap - t.config.lambda_c * doubled.l_ccr;
        assert!((contribution2 - 2.0 * contribution).abs() < 1e-12);
        assert!((contribution - t.config.lambda_d * base.l_dirl).abs() < 1e-12);
    }
}
