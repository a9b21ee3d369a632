use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::GeluKind;

/// Which attention stack an encoder uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VariantKind {
    /// Mixed attention: one self-attention over the whole pair.
    Ma,
    /// Decomposed attention: intra-lingual then cross-lingual sublayers.
    Da,
    /// DA with a reduced hidden width behind an embedding projection.
    DaReduce,
    /// DA with FFN and LayerNorm shared between the two sublayers.
    DaShare,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [Self::Ma, Self::Da, Self::DaReduce, Self::DaShare];

    pub fn is_decomposed(self) -> bool {
        !matches!(self, Self::Ma)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ma => "ma",
            Self::Da => "da",
            Self::DaReduce => "da-reduce",
            Self::DaShare => "da-share",
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "ma" => Ok(Self::Ma),
            "da" => Ok(Self::Da),
            "da-reduce" => Ok(Self::DaReduce),
            "da-share" => Ok(Self::DaShare),
            other => Err(Error::Config(format!("unknown model variant `{other}`"))),
        }
    }
}

/// Projection matrices used by the cross-lingual sublayer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CaProjection {
    None,
    OutputOnly,
    Full,
}

impl CaProjection {
    fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::OutputOnly => "output_only",
            Self::Full => "full",
        }
    }
}

impl FromStr for CaProjection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "output_only" => Ok(Self::OutputOnly),
            "full" => Ok(Self::Full),
            other => Err(Error::Config(format!("unknown ca_projection `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EncoderVariant {
    pub kind: VariantKind,
    pub ca_projection: CaProjection,
    pub ca_ffn_shared: bool,
    pub ca_layernorm_shared: bool,
}

impl EncoderVariant {
    pub fn ma() -> Self {
        Self {
            kind: VariantKind::Ma,
            ca_projection: CaProjection::None,
            ca_ffn_shared: false,
            ca_layernorm_shared: false,
        }
    }

    pub fn da() -> Self {
        Self {
            kind: VariantKind::Da,
            ca_projection: CaProjection::OutputOnly,
            ca_ffn_shared: false,
            ca_layernorm_shared: false,
        }
    }

    pub fn da_reduce() -> Self {
        Self {
            kind: VariantKind::DaReduce,
            ..Self::da()
        }
    }

    /// Sharing FFN and LayerNorm and dropping the CA output projection gives
    /// exact parameter parity with MA.
    pub fn da_share() -> Self {
        Self {
            kind: VariantKind::DaShare,
            ca_projection: CaProjection::None,
            ca_ffn_shared: true,
            ca_layernorm_shared: true,
        }
    }

    pub fn of_kind(kind: VariantKind) -> Self {
        match kind {
            VariantKind::Ma => Self::ma(),
            VariantKind::Da => Self::da(),
            VariantKind::DaReduce => Self::da_reduce(),
            VariantKind::DaShare => Self::da_share(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            VariantKind::DaShare
                if !(self.ca_ffn_shared
                    && self.ca_layernorm_shared
                    && self.ca_projection == CaProjection::None) =>
            {
                Err(Error::Config(
                    "da-share requires shared FFN and LayerNorm and no CA projection".into(),
                ))
            }
            VariantKind::Ma
                if self.ca_ffn_shared
                    || self.ca_layernorm_shared
                    || self.ca_projection != CaProjection::None =>
            {
                Err(Error::Config("ma does not use cross-lingual sublayer options".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Full architectural description of an encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Hidden width of the transformer layers (`d_model`).
    pub d_model: usize,
    /// Per-head width (`d_k`); `num_heads * attn_dim == d_model`.
    pub attn_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub num_languages: usize,
    pub variant: EncoderVariant,
    pub dropout_p: f64,
    /// Equals `d_model` except for DA-reduce, which projects down.
    pub embedding_dim: usize,
    pub positional_embeddings: bool,
    pub language_embeddings: bool,
    /// Additive biases on linear maps and the LM head.
    pub bias: bool,
    /// Learnable gain/bias on every LayerNorm.
    pub norm_affine: bool,
    /// Reuse the token embedding table as the output projection.
    pub tie_lm_head: bool,
    pub gelu: GeluKind,
    /// Restrict CA sublayers to the top `k` layers (`None` = every layer).
    pub ca_top_k_layers: Option<usize>,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl ModelConfig {
    /// Desk-scale default: 2 layers, width 64, 4 heads.
    pub fn desk(kind: VariantKind, vocab_size: usize, num_languages: usize) -> Self {
        Self::sized(kind, vocab_size, num_languages, 64, 4, 2, 256, 128)
    }

    /// Table-scale dimensions (hidden 768, FFN 3072, 12 layers and heads,
    /// 128 positions). Used for parameter accounting only.
    pub fn paper_base(kind: VariantKind) -> Self {
        let mut cfg = Self::sized(kind, 100_000, 59, 768, 12, 12, 3072, 128);
        cfg.tie_lm_head = true;
        cfg
    }

    /// Builds a config of the given shape. DA-reduce keeps `d_model` as the
    /// embedding width and shrinks the layer width by 1/16.
    #[allow(clippy::too_many_arguments)]
    pub fn sized(
        kind: VariantKind,
        vocab_size: usize,
        num_languages: usize,
        d_model: usize,
        num_heads: usize,
        num_layers: usize,
        ffn_dim: usize,
        max_positions: usize,
    ) -> Self {
        let (hidden, embedding_dim) = match kind {
            VariantKind::DaReduce => (d_model - d_model / 16, d_model),
            _ => (d_model, d_model),
        };
        Self {
            vocab_size,
            d_model: hidden,
            attn_dim: hidden / num_heads,
            num_heads,
            num_layers,
            ffn_dim,
            max_positions,
            num_languages,
            variant: EncoderVariant::of_kind(kind),
            dropout_p: 0.1,
            embedding_dim,
            positional_embeddings: true,
            language_embeddings: true,
            bias: true,
            norm_affine: true,
            tie_lm_head: true,
            gelu: GeluKind::Erf,
            ca_top_k_layers: None,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("attn_dim", self.attn_dim),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("ffn_dim", self.ffn_dim),
            ("max_positions", self.max_positions),
            ("num_languages", self.num_languages),
            ("embedding_dim", self.embedding_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.num_heads * self.attn_dim != self.d_model {
            return Err(Error::Config(format!(
                "num_heads ({}) * attn_dim ({}) != d_model ({})",
                self.num_heads, self.attn_dim, self.d_model
            )));
        }
        self.variant.validate()?;
        if self.variant.kind == VariantKind::DaReduce {
            if self.embedding_dim <= self.d_model {
                return Err(Error::Config(format!(
                    "da-reduce needs embedding_dim ({}) > d_model ({})",
                    self.embedding_dim, self.d_model
                )));
            }
        } else if self.embedding_dim != self.d_model {
            return Err(Error::Config(format!(
                "embedding_dim ({}) must equal d_model ({}) unless da-reduce",
                self.embedding_dim, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        if let Some(k) = self.ca_top_k_layers {
            if k > self.num_layers {
                return Err(Error::Config(format!(
                    "ca_top_k_layers {k} exceeds num_layers {}",
                    self.num_layers
                )));
            }
        }
        if !(self.layer_norm_eps > 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::Config("layer_norm_eps must be > 0 and init_std >= 0".into()));
        }
        Ok(())
    }

    pub fn has_projection(&self) -> bool {
        self.embedding_dim != self.d_model
    }

    /// Whether layer `layer` carries a cross-lingual sublayer.
    pub fn layer_has_ca(&self, layer: usize) -> bool {
        self.variant.kind.is_decomposed()
            && match self.ca_top_k_layers {
                None => true,
                Some(k) => layer >= self.num_layers - k,
            }
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let v = &self.variant;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, val: String| {
            m.insert(k.to_string(), val);
        };
        put("vocab_size", self.vocab_size.to_string());
        put("d_model", self.d_model.to_string());
        put("attn_dim", self.attn_dim.to_string());
        put("num_heads", self.num_heads.to_string());
        put("num_layers", self.num_layers.to_string());
        put("ffn_dim", self.ffn_dim.to_string());
        put("max_positions", self.max_positions.to_string());
        put("num_languages", self.num_languages.to_string());
        put("variant", v.kind.name().to_string());
        put("ca_projection", v.ca_projection.name().to_string());
        put("ca_ffn_shared", v.ca_ffn_shared.to_string());
        put("ca_layernorm_shared", v.ca_layernorm_shared.to_string());
        put("dropout_p", self.dropout_p.to_string());
        put("embedding_dim", self.embedding_dim.to_string());
        put("positional_embeddings", self.positional_embeddings.to_string());
        put("language_embeddings", self.language_embeddings.to_string());
        put("bias", self.bias.to_string());
        put("norm_affine", self.norm_affine.to_string());
        put("tie_lm_head", self.tie_lm_head.to_string());
        put(
            "gelu",
            match self.gelu {
                GeluKind::Erf => "erf",
                GeluKind::Tanh => "tanh",
            }
            .to_string(),
        );
        put(
            "ca_top_k_layers",
            self.ca_top_k_layers
                .map_or_else(|| "all".to_string(), |k| k.to_string()),
        );
        put("layer_norm_eps", self.layer_norm_eps.to_string());
        put("init_std", self.init_std.to_string());
        m
    }

    /// Serialized as sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        self.to_kv()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        Self::from_kv(&kv)
    }

    /// Reads every model key from `kv`; keys not present keep the value
    /// from `self`. Unrelated keys are ignored.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            match k.as_str() {
                "vocab_size" => self.vocab_size = parse(k, v)?,
                "d_model" => self.d_model = parse(k, v)?,
                "attn_dim" => self.attn_dim = parse(k, v)?,
                "num_heads" => self.num_heads = parse(k, v)?,
                "num_layers" => self.num_layers = parse(k, v)?,
                "ffn_dim" => self.ffn_dim = parse(k, v)?,
                "max_positions" => self.max_positions = parse(k, v)?,
                "num_languages" => self.num_languages = parse(k, v)?,
                "variant" => self.variant.kind = v.parse()?,
                "ca_projection" => self.variant.ca_projection = v.parse()?,
                "ca_ffn_shared" => self.variant.ca_ffn_shared = parse(k, v)?,
                "ca_layernorm_shared" => self.variant.ca_layernorm_shared = parse(k, v)?,
                "dropout_p" => self.dropout_p = parse(k, v)?,
                "embedding_dim" => self.embedding_dim = parse(k, v)?,
                "positional_embeddings" => self.positional_embeddings = parse(k, v)?,
                "language_embeddings" => self.language_embeddings = parse(k, v)?,
                "bias" => self.bias = parse(k, v)?,
                "norm_affine" => self.norm_affine = parse(k, v)?,
                "tie_lm_head" => self.tie_lm_head = parse(k, v)?,
                "gelu" => {
                    self.gelu = match v.as_str() {
                        "erf" => GeluKind::Erf,
                        "tanh" => GeluKind::Tanh,
                        _ => return Err(Error::Config(format!("unknown gelu `{v}`"))),
                    }
                }
                "ca_top_k_layers" => {
                    self.ca_top_k_layers = if v == "all" { None } else { Some(parse(k, v)?) }
                }
                "layer_norm_eps" => self.layer_norm_eps = parse(k, v)?,
                "init_std" => self.init_std = parse(k, v)?,
                _ => {}
            }
        }
        Ok(())
    }

    fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let kind: VariantKind = kv
            .get("variant")
            .ok_or_else(|| Error::Config("missing `variant`".into()))?
            .parse()?;
        let mut cfg = Self::desk(kind, 1, 1);
        for key in cfg.to_kv().keys() {
            if !kv.contains_key(key) {
                return Err(Error::Config(format!("model config is missing `{key}`")));
            }
        }
        cfg.apply_kv(kv)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

/// Parses a flat `key=value` text; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut m = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        m.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for kind in VariantKind::ALL {
            ModelConfig::desk(kind, 300, 3).validate().unwrap();
            ModelConfig::paper_base(kind).validate().unwrap();
        }
        let reduce = ModelConfig::paper_base(VariantKind::DaReduce);
        assert_eq!((reduce.d_model, reduce.embedding_dim), (720, 768));
        assert_eq!(reduce.attn_dim, 60);
    }

    #[test]
    fn head_width_invariant() {
        let mut cfg = ModelConfig::desk(VariantKind::Ma, 300, 3);
        cfg.attn_dim = 15;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn share_invariants_enforced() {
        let mut cfg = ModelConfig::desk(VariantKind::DaShare, 300, 3);
        cfg.variant.ca_projection = CaProjection::OutputOnly;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk(VariantKind::Ma, 300, 3);
        cfg.variant.ca_ffn_shared = true;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk(VariantKind::Da, 300, 3);
        cfg.embedding_dim = 80;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ModelConfig::desk(VariantKind::DaReduce, 293, 3);
        cfg.ca_top_k_layers = Some(1);
        cfg.gelu = GeluKind::Tanh;
        cfg.dropout_p = 0.07;
        let back = ModelConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn ca_top_k_selects_upper_layers() {
        let mut cfg = ModelConfig::desk(VariantKind::Da, 300, 3);
        cfg.num_layers = 4;
        cfg.ca_top_k_layers = Some(1);
        let with_ca: Vec<bool> = (0..4).map(|l| cfg.layer_has_ca(l)).collect();
        assert_eq!(with_ca, [false, false, false, true]);
        let ma = ModelConfig::desk(VariantKind::Ma, 300, 3);
        assert!(!ma.layer_has_ca(0));
    }
}
