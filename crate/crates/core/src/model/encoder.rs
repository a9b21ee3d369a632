use std::sync::Arc;

use rand::RngCore;

use super::config::{CaProjection, ModelConfig, VariantKind};
use super::layout::SegmentLayout;
use super::params::{Init, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{AttentionBlock, AttentionLayout, Real, Tape, Var};

/// One encoder row: token ids plus the segment layout they follow.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub languages: Vec<usize>,
    pub layout: SegmentLayout,
}

impl EncoderInput {
    /// Continuous positions across both segments; language ids per segment.
    pub fn new(tokens: Vec<usize>, layout: SegmentLayout) -> Result<Self> {
        if tokens.len() != layout.total_length {
            return Err(Error::Layout(format!(
                "{} tokens for a layout of length {}",
                tokens.len(),
                layout.total_length
            )));
        }
        let n = tokens.len();
        Ok(Self {
            positions: (0..n).collect(),
            languages: (0..n).map(|p| layout.language_of(p)).collect(),
            tokens,
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Full,
    /// Run only the intra-lingual sublayer of every layer.
    IaOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionTag {
    Ia,
    Ca,
    Ma,
}

impl AttentionTag {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ia => "IA",
            Self::Ca => "CA",
            Self::Ma => "MA",
        }
    }
}

/// Attention probabilities of one sublayer for one row. `heads[h]` is an
/// `n × n` row-major matrix over the row's positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub tag: AttentionTag,
    pub row: usize,
    pub heads: Vec<Vec<f64>>,
    pub layout: SegmentLayout,
}

impl AttentionRecord {
    pub fn len(&self) -> usize {
        self.layout.total_length
    }

    pub fn is_empty(&self) -> bool {
        self.layout.total_length == 0
    }

    pub fn prob(&self, head: usize, i: usize, j: usize) -> f64 {
        self.heads[head][i * self.len() + j]
    }

    /// Probabilities averaged over heads.
    pub fn head_mean(&self) -> Vec<f64> {
        let n = self.len();
        let mut mean = vec![0.0; n * n];
        for h in &self.heads {
            mean.iter_mut().zip(h).for_each(|(m, &p)| *m += p);
        }
        let k = self.heads.len() as f64;
        mean.iter_mut().for_each(|m| *m /= k);
        mean
    }

    /// Largest deviation of a row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        let n = self.len();
        self.heads
            .iter()
            .flat_map(|h| h.chunks(n).map(|r| (r.iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }

    /// Total probability each query puts on keys outside (IA, MA) or
    /// inside (CA) its own segment, maximized over heads and queries.
    pub fn max_forbidden_mass(&self) -> f64 {
        let n = self.len();
        let l = &self.layout;
        let forbidden = |i: usize, j: usize| match self.tag {
            AttentionTag::Ia => l.segment_of(i) != l.segment_of(j),
            AttentionTag::Ca => l.segment_of(i) == l.segment_of(j),
            AttentionTag::Ma => false,
        };
        let mut worst = 0.0f64;
        for h in &self.heads {
            for i in 0..n {
                let m: f64 = (0..n).filter(|&j| forbidden(i, j)).map(|j| h[i * n + j]).sum();
                worst = worst.max(m);
            }
        }
        worst
    }
}

pub struct ForwardOptions<'r> {
    pub mode: ForwardMode,
    pub record: bool,
    /// Dropout is active only when an RNG is supplied.
    pub dropout_rng: Option<&'r mut dyn RngCore>,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        Self {
            mode: ForwardMode::Full,
            record: false,
            dropout_rng: None,
        }
    }
}

impl ForwardOptions<'_> {
    pub fn eval(mode: ForwardMode, record: bool) -> Self {
        Self {
            mode,
            record,
            dropout_rng: None,
        }
    }
}

pub struct ForwardOutput {
    /// Hidden states of every row, stacked (`Σ n_r × d_model`).
    pub hidden: Var,
    /// Start row of each input row inside `hidden`.
    pub offsets: Vec<usize>,
    pub records: Vec<AttentionRecord>,
}

/// Affine map `x W + b` with `W` stored as `in × out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => tape.add_row(y, b),
            None => Ok(y),
        }
    }
}

/// Projections around an attention call; `None` means identity.
#[derive(Clone, Copy, Debug, Default)]
pub struct AttentionWeights {
    pub q: Option<Linear>,
    pub k: Option<Linear>,
    pub v: Option<Linear>,
    pub o: Option<Linear>,
}

/// Multi-head scaled dot-product attention of `q_in` over `kv_in`.
/// Returns the output and the raw attention node (for its probabilities).
pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    q_in: Var,
    kv_in: Var,
    layout: Arc<AttentionLayout>,
    heads: usize,
    weights: &AttentionWeights,
) -> Result<(Var, Var)> {
    let proj = |tape: &mut Tape<T>, l: Option<Linear>, x: Var| match l {
        Some(l) => l.apply(tape, x),
        None => Ok(x),
    };
    let q = proj(tape, weights.q, q_in)?;
    let k = proj(tape, weights.k, kv_in)?;
    let v = proj(tape, weights.v, kv_in)?;
    let width = *tape.shape(q).last().unwrap_or(&1);
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::Config(format!("{heads} heads do not divide width {width}")));
    }
    let scale = T::of(1.0 / ((width / heads) as f64).sqrt());
    let att = tape.attention(q, k, v, layout, heads, scale)?;
    let out = proj(tape, weights.o, att)?;
    Ok((out, att))
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: Option<Var>,
    bias: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Sublayer {
    attn: AttentionWeights,
    ln1: Norm,
    ffn: Ffn,
    ln2: Norm,
}

fn layer_prefix(layer: usize) -> String {
    format!("layer{layer}")
}

/// Encoder weights plus the configuration they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T: Real> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Encoder<T> {
    /// Initializes weights from N(0, init_std²); biases zero, norm gains one.
    pub fn new<R: rand::Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamStore::new();
        let std = Init::Normal(cfg.init_std);
        let (v, e, d, f) = (cfg.vocab_size, cfg.embedding_dim, cfg.d_model, cfg.ffn_dim);
        p.add("embed.token", &[v, e], std, rng)?;
        if cfg.positional_embeddings {
            p.add("embed.position", &[cfg.max_positions, e], std, rng)?;
        }
        if cfg.language_embeddings {
            p.add("embed.language", &[cfg.num_languages, e], std, rng)?;
        }
        if cfg.has_projection() {
            add_linear(&mut p, &cfg, "embed.proj", e, d, rng)?;
        }
        add_norm(&mut p, &cfg, "embed.ln", d, rng)?;
        for layer in 0..cfg.num_layers {
            let pre = layer_prefix(layer);
            for m in ["q", "k", "v", "o"] {
                add_linear(&mut p, &cfg, &format!("{pre}.attn.{m}"), d, d, rng)?;
            }
            add_norm(&mut p, &cfg, &format!("{pre}.ln1"), d, rng)?;
            add_linear(&mut p, &cfg, &format!("{pre}.ffn.up"), d, f, rng)?;
            add_linear(&mut p, &cfg, &format!("{pre}.ffn.down"), f, d, rng)?;
            add_norm(&mut p, &cfg, &format!("{pre}.ln2"), d, rng)?;
            if cfg.layer_has_ca(layer) {
                let var = cfg.variant;
                let mats: &[&str] = match var.ca_projection {
                    CaProjection::None => &[],
                    CaProjection::OutputOnly => &["o"],
                    CaProjection::Full => &["q", "k", "v", "o"],
                };
                for m in mats {
                    add_linear(&mut p, &cfg, &format!("{pre}.ca.{m}"), d, d, rng)?;
                }
                if !var.ca_layernorm_shared {
                    add_norm(&mut p, &cfg, &format!("{pre}.ca.ln1"), d, rng)?;
                }
                if !var.ca_ffn_shared {
                    add_linear(&mut p, &cfg, &format!("{pre}.ca.ffn.up"), d, f, rng)?;
                    add_linear(&mut p, &cfg, &format!("{pre}.ca.ffn.down"), f, d, rng)?;
                }
                if !var.ca_layernorm_shared {
                    add_norm(&mut p, &cfg, &format!("{pre}.ca.ln2"), d, rng)?;
                }
            }
        }
        if !cfg.tie_lm_head {
            p.add("head.weight", &[v, d], std, rng)?;
        }
        if cfg.bias {
            p.add("head.bias", &[v], Init::Zeros, rng)?;
        }
        Ok(Self { cfg, params: p })
    }

    /// Rebuilds an encoder around existing parameters, checking that every
    /// expected tensor is present with the right shape.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let template = Encoder::<T>::new(
            ModelConfig {
                init_std: 0.0,
                ..cfg.clone()
            },
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
        )?;
        if template.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (name, t) in template.params.iter() {
            match params.by_name(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Format(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Format(format!("missing parameter `{name}`"))),
            }
        }
        Ok(Self { cfg, params })
    }

    /// Places every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.params.register(tape),
        }
    }

    fn var(&self, b: &Bound, name: &str) -> Result<Var> {
        self.params
            .id(name)
            .map(|i| b.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    fn opt_var(&self, b: &Bound, name: &str) -> Option<Var> {
        self.params.id(name).map(|i| b.vars[i])
    }

    fn linear(&self, b: &Bound, name: &str) -> Result<Linear> {
        Ok(Linear {
            weight: self.var(b, &format!("{name}.weight"))?,
            bias: self.opt_var(b, &format!("{name}.bias")),
        })
    }

    fn opt_linear(&self, b: &Bound, name: &str) -> Result<Option<Linear>> {
        if self.params.id(&format!("{name}.weight")).is_some() {
            self.linear(b, name).map(Some)
        } else {
            Ok(None)
        }
    }

    fn norm(&self, b: &Bound, name: &str) -> Norm {
        Norm {
            gain: self.opt_var(b, &format!("{name}.gain")),
            bias: self.opt_var(b, &format!("{name}.bias")),
        }
    }

    fn ia_sublayer(&self, b: &Bound, layer: usize) -> Result<Sublayer> {
        let pre = layer_prefix(layer);
        Ok(Sublayer {
            attn: AttentionWeights {
                q: Some(self.linear(b, &format!("{pre}.attn.q"))?),
                k: Some(self.linear(b, &format!("{pre}.attn.k"))?),
                v: Some(self.linear(b, &format!("{pre}.attn.v"))?),
                o: Some(self.linear(b, &format!("{pre}.attn.o"))?),
            },
            ln1: self.norm(b, &format!("{pre}.ln1")),
            ffn: Ffn {
                up: self.linear(b, &format!("{pre}.ffn.up"))?,
                down: self.linear(b, &format!("{pre}.ffn.down"))?,
            },
            ln2: self.norm(b, &format!("{pre}.ln2")),
        })
    }

    fn ca_sublayer(&self, b: &Bound, layer: usize) -> Result<Sublayer> {
        let pre = layer_prefix(layer);
        let ia = self.ia_sublayer(b, layer)?;
        let var = self.cfg.variant;
        let (ln1, ln2) = if var.ca_layernorm_shared {
            (ia.ln1, ia.ln2)
        } else {
            (
                self.norm(b, &format!("{pre}.ca.ln1")),
                self.norm(b, &format!("{pre}.ca.ln2")),
            )
        };
        let ffn = if var.ca_ffn_shared {
            ia.ffn
        } else {
            Ffn {
                up: self.linear(b, &format!("{pre}.ca.ffn.up"))?,
                down: self.linear(b, &format!("{pre}.ca.ffn.down"))?,
            }
        };
        Ok(Sublayer {
            attn: AttentionWeights {
                q: self.opt_linear(b, &format!("{pre}.ca.q"))?,
                k: self.opt_linear(b, &format!("{pre}.ca.k"))?,
                v: self.opt_linear(b, &format!("{pre}.ca.v"))?,
                o: self.opt_linear(b, &format!("{pre}.ca.o"))?,
            },
            ln1,
            ffn,
            ln2,
        })
    }

    /// Sum of token, positional and language embeddings (then the
    /// embedding-to-hidden projection when present), before normalization.
    pub fn embed(&self, tape: &mut Tape<T>, b: &Bound, input: &EncoderInput) -> Result<Var> {
        let n = input.len();
        if input.positions.len() != n || input.languages.len() != n {
            return Err(Error::Shape(format!(
                "{n} tokens, {} positions, {} languages",
                input.positions.len(),
                input.languages.len()
            )));
        }
        let mut h = tape.gather_rows(self.var(b, "embed.token")?, &input.tokens)?;
        if let Some(t) = self.opt_var(b, "embed.position") {
            let p = tape.gather_rows(t, &input.positions)?;
            h = tape.add(h, p)?;
        }
        if let Some(t) = self.opt_var(b, "embed.language") {
            let l = tape.gather_rows(t, &input.languages)?;
            h = tape.add(h, l)?;
        }
        if self.cfg.has_projection() {
            h = self.linear(b, "embed.proj")?.apply(tape, h)?;
        }
        Ok(h)
    }

    fn layer_norm(&self, tape: &mut Tape<T>, x: Var, n: Norm) -> Result<Var> {
        tape.layer_norm(x, n.gain, n.bias, T::of(self.cfg.layer_norm_eps))
    }

    fn dropout(&self, tape: &mut Tape<T>, x: Var, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
        match rng {
            Some(r) => tape.dropout(x, self.cfg.dropout_p, &mut **r, true),
            None => Ok(x),
        }
    }

    /// attention → Add&LN → FFN → Add&LN. The attention input is also the
    /// residual source.
    fn sublayer(
        &self,
        tape: &mut Tape<T>,
        s: &Sublayer,
        x: Var,
        layout: Arc<AttentionLayout>,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<(Var, Var)> {
        let (a, att) = multi_head_attention(tape, x, x, layout, self.cfg.num_heads, &s.attn)?;
        let a = self.dropout(tape, a, rng)?;
        let h = tape.add(x, a)?;
        let h1 = self.layer_norm(tape, h, s.ln1)?;
        let u = s.ffn.up.apply(tape, h1)?;
        let u = tape.gelu(u, self.cfg.gelu);
        let f = s.ffn.down.apply(tape, u)?;
        let f = self.dropout(tape, f, rng)?;
        let h2 = tape.add(h1, f)?;
        Ok((self.layer_norm(tape, h2, s.ln2)?, att))
    }

    /// Encodes a batch of rows. Rows are stacked; attention never crosses
    /// row boundaries.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        rows: &[EncoderInput],
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        if rows.is_empty() {
            return Err(Error::Shape("forward over an empty batch".into()));
        }
        let ForwardOptions {
            mode,
            record,
            dropout_rng: mut rng,
        } = opts;
        let mut offsets = Vec::with_capacity(rows.len());
        let mut parts = Vec::with_capacity(rows.len());
        let mut total = 0;
        for r in rows {
            offsets.push(total);
            total += r.len();
            parts.push(self.embed(tape, b, r)?);
        }
        let h = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let h = self.layer_norm(tape, h, self.norm(b, "embed.ln"))?;
        let mut h = self.dropout(tape, h, &mut rng)?;

        let decomposed = self.cfg.variant.kind.is_decomposed();
        let self_layout = Arc::new(AttentionLayout {
            blocks: rows
                .iter()
                .zip(&offsets)
                .map(|(r, &o)| {
                    let mask = if decomposed {
                        r.layout.intra_mask()
                    } else {
                        r.layout.mixed_mask()
                    };
                    block(o, r.len(), mask)
                })
                .collect(),
        });
        // Cross-lingual blocks only for bilingual rows, indexed into the
        // gathered bilingual sub-batch.
        let bilingual: Vec<usize> = (0..rows.len())
            .filter(|&i| rows[i].layout.is_bilingual())
            .collect();
        let cross = if decomposed && mode == ForwardMode::Full && !bilingual.is_empty() {
            let mut blocks = Vec::with_capacity(bilingual.len());
            let mut sub = 0;
            for &i in &bilingual {
                blocks.push(block(sub, rows[i].len(), rows[i].layout.cross_mask()?));
                sub += rows[i].len();
            }
            Some(Arc::new(AttentionLayout { blocks }))
        } else {
            None
        };

        let self_tag = if decomposed { AttentionTag::Ia } else { AttentionTag::Ma };
        let mut records = Vec::new();
        for layer in 0..self.cfg.num_layers {
            let s = self.ia_sublayer(b, layer)?;
            let (out, att) = self.sublayer(tape, &s, h, self_layout.clone(), &mut rng)?;
            if record {
                let all: Vec<usize> = (0..rows.len()).collect();
                records.extend(collect(tape, att, layer, self_tag, rows, &all)?);
            }
            h = out;
            let Some(cross) = cross.as_ref().filter(|_| self.cfg.layer_has_ca(layer)) else {
                continue;
            };
            let s = self.ca_sublayer(b, layer)?;
            if bilingual.len() == rows.len() {
                let (out, att) = self.sublayer(tape, &s, h, cross.clone(), &mut rng)?;
                if record {
                    records.extend(collect(tape, att, layer, AttentionTag::Ca, rows, &bilingual)?);
                }
                h = out;
            } else {
                let ids: Vec<usize> = bilingual
                    .iter()
                    .flat_map(|&i| offsets[i]..offsets[i] + rows[i].len())
                    .collect();
                let x = tape.gather_rows(h, &ids)?;
                let (out, att) = self.sublayer(tape, &s, x, cross.clone(), &mut rng)?;
                if record {
                    records.extend(collect(tape, att, layer, AttentionTag::Ca, rows, &bilingual)?);
                }
                // mono rows pass through unchanged
                let mut pieces = Vec::with_capacity(rows.len());
                let mut sub = 0;
                for (i, r) in rows.iter().enumerate() {
                    if r.layout.is_bilingual() {
                        pieces.push(tape.slice_rows(out, sub, r.len())?);
                        sub += r.len();
                    } else {
                        pieces.push(tape.slice_rows(h, offsets[i], r.len())?);
                    }
                }
                h = tape.concat_rows(&pieces)?;
            }
        }
        Ok(ForwardOutput {
            hidden: h,
            offsets,
            records,
        })
    }

    /// Vocabulary logits for the given rows of `hidden` (all rows when
    /// `rows` is `None`). With tying the token table, mapped through the
    /// embedding projection when present, serves as output weight.
    pub fn lm_head(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        hidden: Var,
        rows: Option<&[usize]>,
    ) -> Result<Var> {
        let h = match rows {
            Some(ids) => tape.gather_rows(hidden, ids)?,
            None => hidden,
        };
        let logits = if self.cfg.tie_lm_head {
            let table = self.var(b, "embed.token")?;
            let h = if self.cfg.has_projection() {
                let proj = self.var(b, "embed.proj.weight")?;
                tape.matmul_bt(h, proj)?
            } else {
                h
            };
            tape.matmul_bt(h, table)?
        } else {
            let w = self.var(b, "head.weight")?;
            tape.matmul_bt(h, w)?
        };
        match self.opt_var(b, "head.bias") {
            Some(bias) => tape.add_row(logits, bias),
            None => Ok(logits),
        }
    }
}

/// Tape variables of an encoder's parameters, indexed like its store.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

fn block(offset: usize, n: usize, mask: Vec<bool>) -> AttentionBlock {
    AttentionBlock {
        q_offset: offset,
        q_len: n,
        k_offset: offset,
        k_len: n,
        mask,
    }
}

fn collect<T: Real>(
    tape: &Tape<T>,
    att: Var,
    layer: usize,
    tag: AttentionTag,
    rows: &[EncoderInput],
    which: &[usize],
) -> Result<Vec<AttentionRecord>> {
    let (layout, heads, offsets, probs) = tape
        .attention_probs(att)
        .ok_or_else(|| Error::Shape("not an attention node".into()))?;
    let mut out = Vec::with_capacity(which.len());
    for (blk, (&row, &off)) in layout.blocks.iter().zip(which.iter().zip(&offsets)) {
        let n = blk.q_len;
        let per_head = (0..heads)
            .map(|h| {
                probs[off + h * n * n..off + (h + 1) * n * n]
                    .iter()
                    .map(|p| p.as_f64())
                    .collect()
            })
            .collect();
        out.push(AttentionRecord {
            layer,
            tag,
            row,
            heads: per_head,
            layout: rows[row].layout.clone(),
        });
    }
    Ok(out)
}

fn add_linear<T: Real, R: rand::Rng + ?Sized>(
    p: &mut ParamStore<T>,
    cfg: &ModelConfig,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    p.add(&format!("{name}.weight"), &[fan_in, fan_out], Init::Normal(cfg.init_std), rng)?;
    if cfg.bias {
        p.add(&format!("{name}.bias"), &[fan_out], Init::Zeros, rng)?;
    }
    Ok(())
}

fn add_norm<T: Real, R: rand::Rng + ?Sized>(
    p: &mut ParamStore<T>,
    cfg: &ModelConfig,
    name: &str,
    width: usize,
    rng: &mut R,
) -> Result<()> {
    if cfg.norm_affine {
        p.add(&format!("{name}.gain"), &[width], Init::Ones, rng)?;
        p.add(&format!("{name}.bias"), &[width], Init::Zeros, rng)?;
    }
    Ok(())
}

impl VariantKind {
    /// Tag of the first attention sublayer of each layer.
    pub fn self_attention_tag(self) -> AttentionTag {
        if self.is_decomposed() {
            AttentionTag::Ia
        } else {
            AttentionTag::Ma
        }
    }
}
