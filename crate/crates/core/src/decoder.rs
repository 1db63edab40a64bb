//! Post-norm transformer decoder over word embeddings, cross-attending to the
//! fused difference features, with greedy decoding for inference.

use crate::autodiff::{Graph, Var};
use crate::difference::{multi_head_attention, AttentionWeights};
use crate::error::{Error, Result};
use crate::layers::{argmax, Dropout, LayerNorm, Linear, MASKED};
use crate::tensor::Tensor;
use crate::vocab::{TokenSequence, BOS, EOS, PAD};

#[derive(Debug, Clone)]
pub struct DecoderLayerWeights {
    pub self_attn: AttentionWeights,
    pub cross_attn: AttentionWeights,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ln3: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct DecoderWeights {
    /// `(vocab, D_w)` word table.
    pub embed: Var,
    /// `D_w → D`.
    pub word: Linear,
    /// `(max_len, D)` token-position table.
    pub pos: Var,
    pub layers: Vec<DecoderLayerWeights>,
    /// `D → vocab`.
    pub out: Linear,
}

impl DecoderWeights {
    pub fn max_len(&self, g: &Graph) -> usize {
        g.shape(self.pos)[0]
    }
}

/// Outputs of one decoder layer, all `(B, m, ·)`.
#[derive(Debug)]
pub struct DecoderState {
    /// Words after self-attention (`Ê[W]`).
    pub words: Var,
    /// Words after cross-attention to the difference features (`V̂`).
    pub attended: Var,
    /// Layer output after the feed-forward sublayer (`V̂′`).
    pub output: Var,
    /// Per-head `(B, m, HW)` cross-attention weights.
    pub cross_weights: Vec<Var>,
}

/// `(B, m)` token ids → `(B, m, D)`: table lookup, linear map to `D`, plus
/// the position term.
pub fn embed_words(g: &mut Graph, ids: &[usize], batch: usize, w: &DecoderWeights) -> Result<Var> {
    if batch == 0 || ids.len() % batch != 0 {
        return Err(Error::Contract(format!(
            "{} ids do not split into {batch} rows",
            ids.len()
        )));
    }
    let m = ids.len() / batch;
    let max_len = w.max_len(g);
    if m > max_len {
        return Err(Error::Index {
            index: m - 1,
            extent: max_len,
        });
    }
    let e = g.gather(w.embed, ids, &[batch, m])?;
    let e = w.word.forward(g, e)?;
    let positions: Vec<usize> = (0..m).collect();
    let pos = g.gather(w.pos, &positions, &[m])?;
    g.add(e, pos)
}

/// Additive `(B, m, m)` mask: key `j` is hidden from query `i` when `j > i`
/// or when key `j` is PAD.
pub fn self_attention_mask(ids: &[usize], batch: usize) -> Tensor {
    let m = ids.len() / batch;
    let mut data = Vec::with_capacity(batch * m * m);
    for row in ids.chunks(m) {
        for i in 0..m {
            for (j, &id) in row.iter().enumerate() {
                data.push(if j > i || id == PAD { MASKED } else { 0.0 });
            }
        }
    }
    Tensor::new(vec![batch, m, m], data).expect("mask shape")
}

/// One post-norm layer: residual + layer norm around masked self-attention,
/// cross-attention and the feed-forward block.
pub fn decoder_layer(
    g: &mut Graph,
    words: Var,
    diff: Var,
    mask: Var,
    w: &DecoderLayerWeights,
    dropout: &mut Dropout,
) -> Result<DecoderState> {
    let sa = multi_head_attention(g, words, words, words, &w.self_attn, Some(mask))?.output;
    let sa = dropout.apply(g, sa)?;
    let sum = g.add(words, sa)?;
    let e_hat = w.ln1.forward(g, sum)?;

    let ca = multi_head_attention(g, e_hat, diff, diff, &w.cross_attn, None)?;
    let cross_weights = ca.weights;
    let ca = dropout.apply(g, ca.output)?;
    let sum = g.add(e_hat, ca)?;
    let v_hat = w.ln2.forward(g, sum)?;

    let h = w.ffn1.forward(g, v_hat)?;
    let h = g.relu(h)?;
    let h = w.ffn2.forward(g, h)?;
    let h = dropout.apply(g, h)?;
    let sum = g.add(v_hat, h)?;
    let output = w.ln3.forward(g, sum)?;
    Ok(DecoderState {
        words: e_hat,
        attended: v_hat,
        output,
        cross_weights,
    })
}

/// Runs every layer over teacher-forced `(B, m)` ids and returns the final
/// layer's state.
pub fn decode_teacher_forced(
    g: &mut Graph,
    ids: &[usize],
    batch: usize,
    diff: Var,
    w: &DecoderWeights,
    dropout: &mut Dropout,
) -> Result<DecoderState> {
    if w.layers.is_empty() {
        return Err(Error::Contract("decoder needs at least one layer".into()));
    }
    let mut x = embed_words(g, ids, batch, w)?;
    x = dropout.apply(g, x)?;
    let mask = g.constant(self_attention_mask(ids, batch));
    let mut state = None;
    for layer in &w.layers {
        let s = decoder_layer(g, x, diff, mask, layer, dropout)?;
        x = s.output;
        state = Some(s);
    }
    Ok(state.expect("non-empty layers"))
}

/// Unnormalized vocabulary scores `V̂′ W_h + b_h`.
pub fn vocab_scores(g: &mut Graph, output: Var, w: &DecoderWeights) -> Result<Var> {
    w.out.forward(g, output)
}

/// Softmax over the vocabulary axis.
pub fn vocab_logits(g: &mut Graph, output: Var, w: &DecoderWeights) -> Result<Var> {
    let s = vocab_scores(g, output, w)?;
    let rank = g.shape(s).len();
    g.softmax(s, rank - 1)
}

/// One greedy-decoded caption with its cross-attention rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// BOS, generated tokens, and EOS unless truncated.
    pub tokens: TokenSequence,
    /// For each generated token, the final layer's head-averaged
    /// cross-attention of the position that produced it (length `HW`).
    pub attention: Vec<Vec<f64>>,
}

/// Greedy decoding of a `(B, HW, D)` batch of difference features.
///
/// Every step re-runs the decoder over the whole prefix and appends the
/// argmax of the last position; finished rows are padded with PAD.
pub fn greedy_decode(
    g: &mut Graph,
    diff: Var,
    max_len: usize,
    w: &DecoderWeights,
) -> Result<Vec<Decoded>> {
    if max_len < 2 {
        return Err(Error::Contract(format!(
            "max_len must be >= 2, got {max_len}"
        )));
    }
    let max_len = max_len.min(w.max_len(g));
    let shape = g.shape(diff).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim("greedy_decode", &shape, &[0, 0, 0]));
    }
    let (batch, hw) = (shape[0], shape[1]);
    let mut seqs: Vec<Vec<usize>> = vec![vec![BOS]; batch];
    let mut attention: Vec<Vec<Vec<f64>>> = vec![Vec::new(); batch];
    let mut done = vec![false; batch];
    let mut dropout = Dropout::off();
    for step in 1..max_len {
        let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
        let state = decode_teacher_forced(g, &ids, batch, diff, w, &mut dropout)?;
        let scores = vocab_scores(g, state.output, w)?;
        let scores = g.value(scores);
        let vocab = scores.shape()[2];
        let heads: Vec<&Tensor> = state.cross_weights.iter().map(|&a| g.value(a)).collect();
        for b in 0..batch {
            if done[b] {
                seqs[b].push(PAD);
                continue;
            }
            let start = (b * step + step - 1) * vocab;
            let next = argmax(&scores.data()[start..start + vocab]);
            let row_start = (b * step + step - 1) * hw;
            let mut row = vec![0.0; hw];
            for a in &heads {
                for (r, &v) in row.iter_mut().zip(&a.data()[row_start..row_start + hw]) {
                    *r += v / heads.len() as f64;
                }
            }
            seqs[b].push(next);
            attention[b].push(row);
            done[b] = next == EOS;
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(seqs
        .into_iter()
        .zip(attention)
        .zip(done)
        .map(|((mut ids, attention), finished)| {
            while ids.last() == Some(&PAD) {
                ids.pop();
            }
            Decoded {
                tokens: TokenSequence {
                    ids,
                    truncated: !finished,
                },
                attention,
            }
        })
        .collect())
}
