use std::fmt;

use super::config::{CaProjection, ModelConfig};

/// Trainable scalar counts, derived from a config alone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterReport {
    pub total: usize,
    /// Token, positional and language tables, projection and embedding norm.
    pub embeddings: usize,
    /// Self-attention sublayer (MA or IA) of one layer, FFN and norms included.
    pub per_layer_self: usize,
    /// CA-unique parameters of one layer carrying a CA sublayer.
    pub per_layer_ca: usize,
    /// Number of layers that carry a CA sublayer.
    pub ca_layers: usize,
    pub num_layers: usize,
    pub head: usize,
}

impl ParameterReport {
    pub fn layers(&self) -> usize {
        self.num_layers * self.per_layer_self + self.ca_layers * self.per_layer_ca
    }

    pub fn rows(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("embeddings", self.embeddings),
            ("layers_self", self.num_layers * self.per_layer_self),
            ("layers_ca", self.ca_layers * self.per_layer_ca),
            ("head", self.head),
            ("total", self.total),
        ]
    }
}

impl fmt::Display for ParameterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.rows() {
            writeln!(f, "{k},{v}")?;
        }
        Ok(())
    }
}

pub fn count_parameters(cfg: &ModelConfig) -> ParameterReport {
    let (v, e, d, f) = (cfg.vocab_size, cfg.embedding_dim, cfg.d_model, cfg.ffn_dim);
    let b = usize::from(cfg.bias);
    let linear = |i: usize, o: usize| i * o + b * o;
    let norm = |w: usize| if cfg.norm_affine { 2 * w } else { 0 };

    let mut embeddings = v * e;
    if cfg.positional_embeddings {
        embeddings += cfg.max_positions * e;
    }
    if cfg.language_embeddings {
        embeddings += cfg.num_languages * e;
    }
    if cfg.has_projection() {
        embeddings += linear(e, d);
    }
    embeddings += norm(d);

    let ffn = linear(d, f) + linear(f, d);
    let per_layer_self = 4 * linear(d, d) + 2 * norm(d) + ffn;

    let var = cfg.variant;
    let mut per_layer_ca = match var.ca_projection {
        CaProjection::None => 0,
        CaProjection::OutputOnly => linear(d, d),
        CaProjection::Full => 4 * linear(d, d),
    };
    if !var.ca_layernorm_shared {
        per_layer_ca += 2 * norm(d);
    }
    if !var.ca_ffn_shared {
        per_layer_ca += ffn;
    }
    let ca_layers = (0..cfg.num_layers).filter(|&l| cfg.layer_has_ca(l)).count();
    if ca_layers == 0 {
        per_layer_ca = 0;
    }

    let mut head = 0;
    if !cfg.tie_lm_head {
        head += v * d;
    }
    head += b * v;

    let mut report = ParameterReport {
        total: 0,
        embeddings,
        per_layer_self,
        per_layer_ca,
        ca_layers,
        num_layers: cfg.num_layers,
        head,
    };
    report.total = embeddings + report.layers() + head;
    report
}
