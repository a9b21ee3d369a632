use crate::corpus::{bilingual_row, build_bilingual_example, Vocabulary, World};
use crate::error::{Error, Result};
use crate::model::{AttentionRecord, AttentionTag, Encoder, EncoderInput, ForwardMode, ForwardOptions};
use crate::tensor::{Real, Tape};

use super::align::{alignment_accuracy, mass_balance, AlignmentScore};

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 32;

/// An unmasked translation pair laid out for the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub input: EncoderInput,
    pub gold: Vec<(usize, usize)>,
}

impl PairSample {
    pub fn labels(&self, vocab: &Vocabulary) -> Vec<String> {
        self.input
            .tokens
            .iter()
            .map(|&t| vocab.token(t).unwrap_or("?").to_string())
            .collect()
    }
}

/// Lays out base sentences as `source → target` pairs without masking.
pub fn pair_samples(world: &World, base: &[Vec<usize>], source: usize, target: usize, max_len: usize) -> Result<Vec<PairSample>> {
    let (a, b) = (world.language(source)?, world.language(target)?);
    base.iter()
        .map(|s| {
            let row = bilingual_row(&build_bilingual_example(s, a, b)?, max_len)?;
            Ok(PairSample {
                input: EncoderInput::new(row.tokens, row.layout)?,
                gold: row.gold,
            })
        })
        .collect()
}

/// Hidden states per row (eval mode) as `n_r × d_model` row-major blocks.
pub fn hidden_states<T: Real>(enc: &Encoder<T>, inputs: &[EncoderInput], mode: ForwardMode) -> Result<Vec<Vec<f64>>> {
    let d = enc.cfg.d_model;
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let b = enc.bind(&mut tape);
        let f = enc.forward(&mut tape, &b, chunk, ForwardOptions::eval(mode, false))?;
        let h = tape.value(f.hidden);
        for (r, &o) in chunk.iter().zip(&f.offsets) {
            out.push(h[o * d..(o + r.len()) * d].iter().map(|x| x.as_f64()).collect());
        }
    }
    Ok(out)
}

/// Attention records of every row, with `row` set to the index in `inputs`.
pub fn collect_records<T: Real>(enc: &Encoder<T>, inputs: &[EncoderInput], mode: ForwardMode) -> Result<Vec<AttentionRecord>> {
    let mut all = Vec::new();
    for (c, chunk) in inputs.chunks(EVAL_CHUNK).enumerate() {
        let mut tape = Tape::new();
        let b = enc.bind(&mut tape);
        let f = enc.forward(&mut tape, &b, chunk, ForwardOptions::eval(mode, true))?;
        for mut r in f.records {
            r.row += c * EVAL_CHUNK;
            all.push(r);
        }
    }
    Ok(all)
}

/// The sublayer whose attention carries cross-lingual alignment: CA for
/// decomposed models, the mixed self-attention otherwise.
pub fn alignment_tag<T: Real>(enc: &Encoder<T>) -> AttentionTag {
    if enc.cfg.variant.kind.is_decomposed() {
        AttentionTag::Ca
    } else {
        AttentionTag::Ma
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentEval {
    pub tag: AttentionTag,
    /// `(layer, pooled score)` for every layer with a record of `tag`.
    pub per_layer: Vec<(usize, AlignmentScore)>,
}

impl AlignmentEval {
    pub fn best(&self) -> (usize, AlignmentScore) {
        self.per_layer
            .iter()
            .copied()
            .max_by(|a, b| a.1.accuracy.total_cmp(&b.1.accuracy).then(b.0.cmp(&a.0)))
            .expect("at least one layer")
    }

    pub fn last(&self) -> (usize, AlignmentScore) {
        *self.per_layer.last().expect("at least one layer")
    }
}

/// Pools alignment accuracy over `samples`, per layer.
pub fn evaluate_alignment<T: Real>(enc: &Encoder<T>, samples: &[PairSample]) -> Result<AlignmentEval> {
    let tag = alignment_tag(enc);
    let inputs: Vec<EncoderInput> = samples.iter().map(|s| s.input.clone()).collect();
    let mut per_layer: Vec<(usize, AlignmentScore)> = Vec::new();
    for r in collect_records(enc, &inputs, ForwardMode::Full)? {
        if r.tag != tag {
            continue;
        }
        let s = alignment_accuracy(&r, &samples[r.row].gold)?;
        match per_layer.iter_mut().find(|(l, _)| *l == r.layer) {
            Some((_, acc)) => acc.merge(&s),
            None => per_layer.push((r.layer, s)),
        }
    }
    if per_layer.is_empty() {
        return Err(Error::Data(format!("no {} records to score", tag.name())));
    }
    per_layer.sort_by_key(|(l, _)| *l);
    Ok(AlignmentEval { tag, per_layer })
}

/// Mean `(intra, cross)` mass per layer over `samples` (MA models only).
pub fn evaluate_mass<T: Real>(enc: &Encoder<T>, samples: &[PairSample]) -> Result<Vec<(usize, f64, f64)>> {
    let inputs: Vec<EncoderInput> = samples.iter().map(|s| s.input.clone()).collect();
    let mut acc: Vec<(usize, f64, f64, usize)> = Vec::new();
    for r in collect_records(enc, &inputs, ForwardMode::Full)? {
        let m = mass_balance(&r)?;
        let k = m.rows.len();
        let (i, c) = (m.mean_intra * k as f64, m.mean_cross * k as f64);
        match acc.iter_mut().find(|e| e.0 == r.layer) {
            Some(e) => {
                e.1 += i;
                e.2 += c;
                e.3 += k;
            }
            None => acc.push((r.layer, i, c, k)),
        }
    }
    acc.sort_by_key(|e| e.0);
    Ok(acc.into_iter().map(|(l, i, c, k)| (l, i / k as f64, c / k as f64)).collect())
}
