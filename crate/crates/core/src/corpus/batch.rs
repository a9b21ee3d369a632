use rand::Rng;

use super::language::ParallelExample;
use super::vocab::{Vocabulary, BOS, EOS, PAD, SEP};
use crate::error::{Error, Result};
use crate::model::{EncoderInput, SegmentLayout};
use crate::objectives::{plan_masking, MaskingPlan, IGNORE_INDEX};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DataType {
    Mono,
    Bilingual,
}

impl DataType {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mono => "mono",
            Self::Bilingual => "bilingual",
        }
    }
}

/// A monolingual sentence of language token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MonoSentence {
    pub language: usize,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Example {
    Mono(MonoSentence),
    Parallel(ParallelExample),
}

impl Example {
    pub fn data_type(&self) -> DataType {
        match self {
            Self::Mono(_) => DataType::Mono,
            Self::Parallel(_) => DataType::Bilingual,
        }
    }
}

/// Rows of one data type, each with its own length (no batch-level
/// padding is materialized; see [`Batch::token_matrix`]).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub data_type: DataType,
    /// Encoder inputs carrying the corrupted tokens.
    pub inputs: Vec<EncoderInput>,
    pub targets: Vec<Vec<i64>>,
    pub plans: Vec<MaskingPlan>,
    /// Gold `(X position, Y position)` pairs in row coordinates.
    pub gold: Vec<Vec<(usize, usize)>>,
    /// A sentence of this row had to be cut to fit.
    pub truncated: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn width(&self) -> usize {
        self.inputs.iter().map(EncoderInput::len).max().unwrap_or(0)
    }

    pub fn predicted(&self) -> usize {
        self.targets.iter().flatten().filter(|&&t| t != IGNORE_INDEX).count()
    }

    /// Corrupted token ids padded to `width` with `[PAD]`.
    pub fn token_matrix(&self) -> Vec<Vec<usize>> {
        let w = self.width();
        self.inputs
            .iter()
            .map(|r| {
                let mut t = r.tokens.clone();
                t.resize(w, PAD);
                t
            })
            .collect()
    }

    /// Targets padded to `width` with the ignore index.
    pub fn target_matrix(&self) -> Vec<Vec<i64>> {
        let w = self.width();
        self.targets
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.resize(w, IGNORE_INDEX);
                t
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.inputs.len();
        if n == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        if self.targets.len() != n || self.plans.len() != n || self.gold.len() != n || self.truncated.len() != n {
            return Err(Error::Data("batch fields disagree in row count".into()));
        }
        for (i, (inp, t)) in self.inputs.iter().zip(&self.targets).enumerate() {
            if t.len() != inp.len() {
                return Err(Error::Data(format!("row {i}: {} targets for {} tokens", t.len(), inp.len())));
            }
            let bilingual = inp.layout.is_bilingual();
            if bilingual != (self.data_type == DataType::Bilingual) {
                return Err(Error::Data(format!(
                    "row {i} layout does not match a {} batch",
                    self.data_type.name()
                )));
            }
        }
        Ok(())
    }
}

/// Greedy packing of sentences into `[BOS] s1 [SEP] s2 … [EOS]` rows of
/// at most `max_len` tokens. Returns each row's sentence index range; a
/// sentence too long for an empty row gets a row of its own (truncated).
pub fn pack_ranges(lengths: &[usize], max_len: usize) -> Vec<std::ops::Range<usize>> {
    let mut rows = Vec::new();
    let mut start = 0;
    let mut used = 1; // [BOS]
    for (i, &len) in lengths.iter().enumerate() {
        // each sentence is followed by [SEP] or [EOS]
        if i > start && used + len + 1 > max_len {
            rows.push(start..i);
            start = i;
            used = 1;
        }
        used += len + 1;
    }
    if start < lengths.len() {
        rows.push(start..lengths.len());
    }
    rows
}

/// Builds one batch from homogeneous examples, masking every row with a
/// seed drawn from `rng`.
pub fn make_batch<R: Rng + ?Sized>(
    examples: &[Example],
    data_type: DataType,
    vocab: &Vocabulary,
    max_len: usize,
    mask_rate: f64,
    rng: &mut R,
) -> Result<Batch> {
    if examples.is_empty() {
        return Err(Error::Data("no examples".into()));
    }
    if examples.iter().any(|e| e.data_type() != data_type) {
        return Err(Error::Data(format!(
            "examples are not all {}",
            data_type.name()
        )));
    }
    if max_len < 4 {
        return Err(Error::Config(format!("max_len {max_len} is too short for a row")));
    }
    let mv = vocab.masking_vocab();
    let mut batch = Batch {
        data_type,
        inputs: Vec::new(),
        targets: Vec::new(),
        plans: Vec::new(),
        gold: Vec::new(),
        truncated: Vec::new(),
    };
    match data_type {
        DataType::Mono => {
            let sents: Vec<&MonoSentence> = examples
                .iter()
                .map(|e| match e {
                    Example::Mono(s) => s,
                    Example::Parallel(_) => unreachable!("checked above"),
                })
                .collect();
            let lengths: Vec<usize> = sents.iter().map(|s| s.tokens.len()).collect();
            for range in pack_ranges(&lengths, max_len) {
                let language = sents[range.start].language;
                if sents[range.clone()].iter().any(|s| s.language != language) {
                    return Err(Error::Data("a packed row mixes languages".into()));
                }
                let mut tokens = vec![BOS];
                let mut truncated = false;
                for (k, s) in sents[range.clone()].iter().enumerate() {
                    let room = max_len - tokens.len() - 1;
                    let take = s.tokens.len().min(room);
                    truncated |= take < s.tokens.len();
                    tokens.extend_from_slice(&s.tokens[..take]);
                    tokens.push(if k + 1 == range.len() { EOS } else { SEP });
                }
                let special: Vec<bool> = tokens.iter().map(|&t| Vocabulary::is_special(t)).collect();
                let layout = SegmentLayout::mono(tokens.len(), language, special.clone())?;
                let plan = plan_masking(&tokens, &special, mask_rate, &mv, rng.random())?;
                batch.targets.push(plan.targets());
                batch.inputs.push(EncoderInput::new(plan.inputs(), layout)?);
                batch.plans.push(plan);
                batch.gold.push(Vec::new());
                batch.truncated.push(truncated);
            }
        }
        DataType::Bilingual => {
            for e in examples {
                let Example::Parallel(p) = e else { unreachable!("checked above") };
                let row = bilingual_row(p, max_len)?;
                let ineligible: Vec<bool> = row
                    .tokens
                    .iter()
                    .map(|&t| Vocabulary::is_special(t))
                    .collect();
                let b = row.layout.boundary;
                // each half is masked by its own plan
                let px = plan_masking(&row.tokens[..b], &ineligible[..b], mask_rate, &mv, rng.random())?;
                let py = plan_masking(&row.tokens[b..], &ineligible[b..], mask_rate, &mv, rng.random())?;
                let plan = MaskingPlan {
                    actions: px.actions.iter().chain(&py.actions).copied().collect(),
                    original: row.tokens.clone(),
                    mask_id: mv.mask_id,
                    seed: px.seed,
                };
                batch.targets.push(plan.targets());
                batch.inputs.push(EncoderInput::new(plan.inputs(), row.layout)?);
                batch.plans.push(plan);
                batch.gold.push(row.gold);
                batch.truncated.push(row.truncated);
            }
        }
    }
    Ok(batch)
}

/// Unmasked `[BOS] X [SEP] | Y [EOS]` row of a translation pair.
#[derive(Clone, Debug, PartialEq)]
pub struct BilingualRow {
    pub tokens: Vec<usize>,
    pub layout: SegmentLayout,
    /// Gold pairs in row coordinates.
    pub gold: Vec<(usize, usize)>,
    pub truncated: bool,
}

/// Lays out a pair with both halves padded to a common length: X occupies
/// `[BOS] X [SEP]` and Y `Y [EOS]`, each followed by `[PAD]`s as needed.
/// Pairs longer than `max_len` lose tokens from the end of each side.
pub fn bilingual_row(p: &ParallelExample, max_len: usize) -> Result<BilingualRow> {
    let half_cap = max_len / 2;
    if half_cap < 2 {
        return Err(Error::Config(format!("max_len {max_len} is too short for a pair")));
    }
    let (nx, ny) = (p.source.len().min(half_cap - 2), p.target.len().min(half_cap - 1));
    if nx == 0 || ny == 0 {
        return Err(Error::Data("translation pair with an empty side".into()));
    }
    let truncated = nx < p.source.len() || ny < p.target.len();
    let half = (nx + 2).max(ny + 1);
    let mut tokens = Vec::with_capacity(2 * half);
    tokens.push(BOS);
    tokens.extend_from_slice(&p.source[..nx]);
    tokens.push(SEP);
    tokens.resize(half, PAD);
    tokens.extend_from_slice(&p.target[..ny]);
    tokens.push(EOS);
    tokens.resize(2 * half, PAD);
    let special: Vec<bool> = tokens.iter().map(|&t| Vocabulary::is_special(t) && t != PAD).collect();
    let padding: Vec<bool> = tokens.iter().map(|&t| t == PAD).collect();
    let layout = SegmentLayout::new(
        tokens.len(),
        half,
        p.source_language,
        p.target_language,
        special,
        padding,
    )?;
    let gold = p
        .gold
        .iter()
        .filter(|&&(i, j)| i < nx && j < ny)
        .map(|&(i, j)| (1 + i, half + j))
        .collect();
    Ok(BilingualRow {
        tokens,
        layout,
        gold,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        let mut v = Vocabulary::new();
        for i in 0..30 {
            v.add(&format!("t{i}")).unwrap();
        }
        v
    }

    fn pair() -> ParallelExample {
        ParallelExample {
            source: vec![5, 6, 7],
            target: vec![20, 21, 22],
            gold: vec![(0, 2), (1, 1), (2, 0)],
            source_language: 0,
            target_language: 2,
        }
    }

    #[test]
    fn bilingual_layout_and_gold_round_trip() {
        let row = bilingual_row(&pair(), 32).unwrap();
        assert_eq!(row.tokens, vec![BOS, 5, 6, 7, SEP, 20, 21, 22, EOS, PAD]);
        assert_eq!(row.layout.boundary, 1 + 3 + 1);
        assert_eq!(row.layout.language_of(6), 2);
        let back: Vec<(usize, usize)> = row.gold.iter().map(|&(i, j)| (i - 1, j - row.layout.boundary)).collect();
        assert_eq!(back, pair().gold);
        for &(i, j) in &row.gold {
            assert_eq!(row.tokens[i], pair().source[i - 1]);
            assert_eq!(row.tokens[j], pair().target[j - 5]);
        }
    }

    #[test]
    fn unequal_halves_are_padded_and_long_pairs_truncated() {
        let mut p = pair();
        p.target = vec![20, 21, 22, 23, 24, 25];
        p.gold = vec![(0, 0), (1, 1), (2, 5)];
        let row = bilingual_row(&p, 32).unwrap();
        assert_eq!(row.layout.boundary, 7);
        assert_eq!(&row.tokens[..7], &[BOS, 5, 6, 7, SEP, PAD, PAD]);
        assert!(!row.truncated);
        let cut = bilingual_row(&p, 10).unwrap();
        assert!(cut.truncated);
        assert_eq!(cut.tokens.len(), 10);
        assert_eq!(cut.gold, vec![(1, 5), (2, 6)]);
    }

    #[test]
    fn batches_are_masked_per_row_and_pad_with_ignore() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = make_batch(&[Example::Parallel(pair())], DataType::Bilingual, &v, 32, 0.5, &mut rng).unwrap();
        b.validate().unwrap();
        for (a, &t) in b.plans[0].actions.iter().zip(&b.plans[0].original) {
            if Vocabulary::is_special(t) {
                assert!(!a.is_predicted());
            }
        }
        let mono: Vec<Example> = [vec![5, 6, 7, 8], vec![9, 10], vec![11; 9]]
            .into_iter()
            .map(|tokens| Example::Mono(MonoSentence { language: 1, tokens }))
            .collect();
        let b = make_batch(&mono, DataType::Mono, &v, 10, 0.15, &mut rng).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.plans[0].original, vec![BOS, 5, 6, 7, 8, SEP, 9, 10, EOS]);
        assert!(b.truncated[1]);
        assert_eq!(b.inputs[1].len(), 10);
        let t = b.target_matrix();
        assert_eq!(t[0][9], IGNORE_INDEX);
        assert_eq!(b.token_matrix()[0][9], PAD);
        assert!(make_batch(&mono, DataType::Bilingual, &v, 10, 0.15, &mut rng).is_err());
    }

    #[test]
    fn packing_ranges() {
        assert_eq!(pack_ranges(&[3, 3, 3], 9), vec![0..2, 2..3]);
        assert_eq!(pack_ranges(&[20, 1], 9), vec![0..1, 1..2]);
        assert!(pack_ranges(&[], 9).is_empty());
    }
}
