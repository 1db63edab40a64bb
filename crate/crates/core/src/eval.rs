//! Caption metrics, attention maps, the pointing game, and distractor sweeps.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{generate, Example};
use crate::decoder::Decoded;
use crate::error::{Error, Result};
use crate::layers::argmax;
use crate::scenes::{Caption, Cell, DatasetSpec, DistractorRange};
use crate::vocab::{Vocab, EOS};

fn ngram_counts<S: AsRef<str>>(words: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    for w in words.windows(n) {
        *counts
            .entry(w.iter().map(AsRef::as_ref).collect())
            .or_insert(0) += 1;
    }
    counts
}

/// Corpus BLEU-4 with one reference per candidate: clipped n-gram precisions
/// for n = 1..4 pooled over the corpus, uniform geometric mean, brevity
/// penalty, no smoothing.
pub fn bleu4<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Contract("BLEU over an empty candidate set".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::dim(
            "bleu4",
            &[candidates.len()],
            &[references.len()],
        ));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (gram, count) in ngram_counts(c, n) {
                matched[n - 1] += count.min(rc.get(&gram).copied().unwrap_or(0));
                total[n - 1] += count;
            }
        }
    }
    if matched.iter().zip(&total).any(|(&m, &t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_precision: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / 4.0;
    let brevity = if cand_len > ref_len {
        0.0
    } else {
        1.0 - ref_len as f64 / cand_len as f64
    };
    Ok((log_precision + brevity).exp())
}

/// Fraction of candidates identical to their reference.
pub fn exact_match<T: PartialEq>(candidates: &[T], references: &[T]) -> f64 {
    if candidates.is_empty() {
        return 0.0;
    }
    let hits = candidates
        .iter()
        .zip(references)
        .filter(|(c, r)| c == r)
        .count();
    hits as f64 / candidates.len() as f64
}

/// Head-averaged cross-attention over the feature grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    /// One `height·width` row-major map per generated token.
    pub tokens: Vec<(String, Vec<f64>)>,
    /// Mean over content tokens (the end sentinel excluded); falls back to
    /// every generated token when there is no content token.
    pub aggregate: Vec<f64>,
}

impl AttentionMap {
    pub fn from_decoded(
        decoded: &Decoded,
        vocab: &Vocab,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let generated = &decoded.tokens.ids[1..];
        if generated.len() != decoded.attention.len() {
            return Err(Error::dim(
                "attention map",
                &[generated.len()],
                &[decoded.attention.len()],
            ));
        }
        let mut tokens = Vec::with_capacity(generated.len());
        for (&id, row) in generated.iter().zip(&decoded.attention) {
            if row.len() != height * width {
                return Err(Error::dim("attention map", &[row.len()], &[height, width]));
            }
            tokens.push((vocab.word(id).to_string(), row.clone()));
        }
        let content: Vec<&Vec<f64>> = generated
            .iter()
            .zip(&decoded.attention)
            .filter(|(&id, _)| id != EOS)
            .map(|(_, row)| row)
            .collect();
        let rows = if content.is_empty() {
            decoded.attention.iter().collect()
        } else {
            content
        };
        let mut aggregate = vec![0.0; height * width];
        for row in &rows {
            for (a, v) in aggregate.iter_mut().zip(row.iter()) {
                *a += v / rows.len() as f64;
            }
        }
        Ok(Self {
            height,
            width,
            tokens,
            aggregate,
        })
    }

    /// Cell holding the aggregate maximum (lowest index on ties).
    pub fn peak(&self) -> Cell {
        let i = argmax(&self.aggregate);
        Cell::new(i / self.width, i % self.width)
    }
}

/// Hit iff the aggregate peak is a changed cell or one of its (cyclic)
/// 8-neighbours. `None` when there is nothing to point at.
pub fn pointing_game(map: &AttentionMap, change_cells: &[Cell]) -> Option<bool> {
    if change_cells.is_empty() {
        return None;
    }
    let peak = map.peak();
    let grid = map.height.max(map.width);
    Some(
        change_cells
            .iter()
            .any(|&c| peak.cyclic_distance(c, grid) <= 1),
    )
}

/// Binary 8-bit portable graymap, scaled so the maximum is white.
pub fn encode_pgm(height: usize, width: usize, values: &[f64]) -> Vec<u8> {
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if max > 0.0 {
            (v / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

/// Parses the header of a binary graymap: `(width, height, maxval, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos as u64, "truncated graymap header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or(""));
    }
    if fields[0] != "P5" {
        return Err(Error::format(0, "not a binary graymap"));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(0, format!("bad header field {s:?}")))
    };
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    let pixels = &bytes[(pos + 1).min(bytes.len())..];
    if pixels.len() != w * h {
        return Err(Error::format(
            bytes.len() as u64,
            "pixel count does not match header",
        ));
    }
    Ok((w, h, max, pixels))
}

/// Writes `<index>_<token>.pgm` per generated token and `aggregate.pgm`.
pub fn export_attention(map: &AttentionMap, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: String, values: &[f64]| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, encode_pgm(map.height, map.width, values)).map_err(|e| Error::io(&path, e))
    };
    for (i, (token, values)) in map.tokens.iter().enumerate() {
        let safe: String = token
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
            .collect();
        write(format!("{i}_{safe}.pgm"), values)?;
    }
    write("aggregate.pgm".to_string(), &map.aggregate)
}

/// Metrics over one group of examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub count: usize,
    pub bleu4: f64,
    pub exact_match: f64,
    /// Position-wise agreement of content tokens, over the longer of the
    /// two sequences.
    pub token_accuracy: f64,
    /// Hit rate over examples with a visible change.
    pub pointing_game: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Scores,
    pub per_change_type: BTreeMap<String, Scores>,
    /// Keyed by the larger absolute shift of the pair.
    pub per_shift: BTreeMap<String, Scores>,
}

/// One line of a report stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportLine {
    pub scope: String,
    pub key: String,
    #[serde(flatten)]
    pub scores: Scores,
}

impl EvalReport {
    pub fn lines(&self) -> Vec<ReportLine> {
        let mut out = vec![ReportLine {
            scope: "overall".into(),
            key: "all".into(),
            scores: self.overall.clone(),
        }];
        for (scope, map) in [
            ("change_type", &self.per_change_type),
            ("shift", &self.per_shift),
        ] {
            for (k, s) in map {
                out.push(ReportLine {
                    scope: scope.into(),
                    key: k.clone(),
                    scores: s.clone(),
                });
            }
        }
        out
    }
}

pub fn write_report_lines(lines: &[ReportLine], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for l in lines {
        writeln!(
            f,
            "{}",
            serde_json::to_string(l).expect("report serializes")
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

struct Scored {
    candidate: Vec<String>,
    reference: Vec<String>,
    hit: Option<bool>,
}

fn score(items: &[&Scored]) -> Result<Scores> {
    let cands: Vec<Vec<String>> = items.iter().map(|s| s.candidate.clone()).collect();
    let refs: Vec<Vec<String>> = items.iter().map(|s| s.reference.clone()).collect();
    let (mut agree, mut span) = (0usize, 0usize);
    for (c, r) in cands.iter().zip(&refs) {
        agree += c.iter().zip(r).filter(|(a, b)| a == b).count();
        span += c.len().max(r.len());
    }
    let hits: Vec<bool> = items.iter().filter_map(|s| s.hit).collect();
    Ok(Scores {
        count: items.len(),
        bleu4: bleu4(&cands, &refs)?,
        exact_match: exact_match(&cands, &refs),
        token_accuracy: if span == 0 {
            1.0
        } else {
            agree as f64 / span as f64
        },
        pointing_game: if hits.is_empty() {
            None
        } else {
            Some(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
        },
    })
}

/// Generated captions and attention maps for every example, in order.
pub fn caption_examples(
    ckpt: &Checkpoint,
    examples: &[Example],
) -> Result<Vec<(Caption, AttentionMap)>> {
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(CHUNK) {
        let before: Vec<_> = chunk.iter().map(|e| &e.before).collect();
        let after: Vec<_> = chunk.iter().map(|e| &e.after).collect();
        for (d, e) in ckpt.caption(&before, &after)?.iter().zip(chunk) {
            let map = AttentionMap::from_decoded(d, &ckpt.vocab, e.before.height, e.before.width)?;
            out.push((ckpt.vocab.decode(&d.tokens), map));
        }
    }
    Ok(out)
}

/// Captions every example greedily and scores against the references.
pub fn evaluate(ckpt: &Checkpoint, examples: &[Example]) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let generated = caption_examples(ckpt, examples)?;
    let scored: Vec<Scored> = generated
        .into_iter()
        .zip(examples)
        .map(|((caption, map), e)| Scored {
            candidate: caption.0,
            reference: e.caption.0.clone(),
            hit: pointing_game(&map, &e.change_cells),
        })
        .collect();
    let all: Vec<&Scored> = scored.iter().collect();
    let mut by_type: BTreeMap<String, Vec<&Scored>> = BTreeMap::new();
    let mut by_shift: BTreeMap<String, Vec<&Scored>> = BTreeMap::new();
    for (s, e) in scored.iter().zip(examples) {
        by_type
            .entry(e.change_type.name().to_string())
            .or_default()
            .push(s);
        let shift = e
            .distractor
            .shift
            .0
            .unsigned_abs()
            .max(e.distractor.shift.1.unsigned_abs());
        by_shift.entry(shift.to_string()).or_default().push(s);
    }
    let group = |m: BTreeMap<String, Vec<&Scored>>| -> Result<BTreeMap<String, Scores>> {
        m.into_iter().map(|(k, v)| Ok((k, score(&v)?))).collect()
    };
    Ok(EvalReport {
        overall: score(&all)?,
        per_change_type: group(by_type)?,
        per_shift: group(by_shift)?,
    })
}

/// One point of a robustness sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub magnitude: u32,
    pub report: EvalReport,
}

/// Regenerates the test set of `template` at each distractor magnitude
/// (same seeds, so only the distractors differ) and evaluates on each.
pub fn distractor_sweep(
    ckpt: &Checkpoint,
    template: &DatasetSpec,
    magnitudes: &[u32],
) -> Result<Vec<SweepPoint>> {
    magnitudes
        .iter()
        .map(|&k| {
            let spec = DatasetSpec {
                distractor: DistractorRange::magnitude(k, template.distractor.noise_sigma),
                ..template.clone()
            };
            Ok(SweepPoint {
                magnitude: k,
                report: evaluate(ckpt, &generate(&spec)?)?,
            })
        })
        .collect()
}

pub fn sweep_lines(points: &[SweepPoint]) -> Vec<ReportLine> {
    points
        .iter()
        .map(|p| ReportLine {
            scope: "magnitude".into(),
            key: p.magnitude.to_string(),
            scores: p.report.overall.clone(),
        })
        .collect()
}
