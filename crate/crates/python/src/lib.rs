//! Python module `dalab_py`: train, checkpoint and analyse encoders from
//! Python. Everything runs in f32 on the calling thread.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use dalab::analysis::{
    collect_records, evaluate_alignment, evaluate_mass, export_heatmap, probe_pair_classification, probe_token_tagging,
    ProbeKind, ProbeTask,
};
use dalab::corpus::{generate_base_corpus, MASK, NUM_SPECIALS};
use dalab::model::{count_parameters, Checkpoint, EncoderInput, ForwardMode, ModelConfig, VariantKind};
use dalab::objectives::{plan_masking, LossMode, MaskingVocab, ReweightConfig, ReweightState};
use dalab::trainer::{TrainConfig, Trainer};
use dalab::Error;

pub fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Config(_)
        | Error::Data(_)
        | Error::Shape(_)
        | Error::Index(_)
        | Error::Corpus(_)
        | Error::Format(_)
        | Error::Masking(_)
        | Error::Layout(_)
        | Error::Scheduler(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn variant(name: &str) -> PyResult<VariantKind> {
    name.parse().map_err(to_py_err)
}

/// A training run over one synthetic world.
#[pyclass(name = "Trainer", unsendable)]
pub struct PyTrainer {
    inner: Trainer,
}

#[pymethods]
impl PyTrainer {
    /// `overrides` takes the same keys as a config file.
    #[new]
    #[pyo3(signature = (model, seed = 0, objective = "ce", overrides = None))]
    fn new(model: &str, seed: u64, objective: &str, overrides: Option<BTreeMap<String, String>>) -> PyResult<Self> {
        let kind = variant(model)?;
        let objective: LossMode = objective.parse().map_err(to_py_err)?;
        let mut cfg = TrainConfig::desk(kind);
        if let Some(kv) = overrides {
            cfg.apply_kv(&kv).map_err(to_py_err)?;
        }
        cfg.seed = seed;
        cfg.objective = objective;
        Ok(Self {
            inner: Trainer::new(cfg).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(to_py_err)?;
        Ok(Self {
            inner: Trainer::resume(&ck).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.state.step
    }

    #[getter]
    fn config(&self) -> BTreeMap<String, String> {
        self.inner.cfg.to_kv()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        count_parameters(&self.inner.state.encoder.cfg).total
    }

    /// Runs `steps` updates; returns `(step, data_type, loss, mean_ce, lr)`.
    fn run(&mut self, steps: u64) -> PyResult<Vec<(u64, String, f64, f64, f64)>> {
        let reports = self.inner.run(steps).map_err(to_py_err)?;
        Ok(reports
            .into_iter()
            .map(|r| (r.step, r.data_type.name().to_string(), r.loss, r.mean_ce, r.lr))
            .collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.checkpoint().save(&path).map_err(to_py_err)
    }

    /// `(layer, accuracy, uniform baseline)` on held-out pairs.
    #[pyo3(signature = (limit = 200))]
    fn alignment(&self, limit: usize) -> PyResult<Vec<(usize, f64, f64)>> {
        let samples = self.inner.held_out_pairs(limit).map_err(to_py_err)?;
        let eval = evaluate_alignment(&self.inner.state.encoder, &samples).map_err(to_py_err)?;
        Ok(eval
            .per_layer
            .iter()
            .map(|(l, s)| (*l, s.accuracy, s.uniform_baseline()))
            .collect())
    }

    /// `(layer, intra, cross)` attention mass; mixed attention only.
    #[pyo3(signature = (limit = 200))]
    fn mass(&self, limit: usize) -> PyResult<Vec<(usize, f64, f64)>> {
        let samples = self.inner.held_out_pairs(limit).map_err(to_py_err)?;
        evaluate_mass(&self.inner.state.encoder, &samples).map_err(to_py_err)
    }

    /// Trains a linear probe in the first pair's source language. Returns
    /// the in-language accuracy and `(language, accuracy)` zero-shot.
    #[pyo3(signature = (kind = "pair", seed = 0))]
    fn probe(&self, kind: &str, seed: u64) -> PyResult<(f64, Vec<(usize, f64)>)> {
        let t = &self.inner;
        let src = t.cfg.data.pairs.first().map_or(0, |p| p.source);
        let others: Vec<usize> = (0..t.world.num_languages()).filter(|&l| l != src).collect();
        let base = generate_base_corpus(&t.world.grammar, t.cfg.data.corpus_seed.wrapping_add(2), 2000);
        let enc = &t.state.encoder;
        let o = match kind {
            "pair" => probe_pair_classification(
                enc,
                &t.world,
                &base,
                &ProbeTask::new(ProbeKind::PairClassification, src, others),
                seed,
            ),
            "tag" => probe_token_tagging(enc, &t.world, &base, &ProbeTask::new(ProbeKind::TokenTagging, src, others), seed),
            _ => return Err(PyValueError::new_err(format!("unknown probe `{kind}`, expected pair or tag"))),
        }
        .map_err(to_py_err)?;
        Ok((o.in_language, o.zero_shot))
    }

    /// Writes heatmaps of every attention sublayer for the first `limit`
    /// held-out pairs; returns the CSV paths.
    #[pyo3(signature = (out, limit = 1))]
    fn heatmaps(&self, out: PathBuf, limit: usize) -> PyResult<Vec<String>> {
        let t = &self.inner;
        let samples = t.held_out_pairs(limit).map_err(to_py_err)?;
        let inputs: Vec<EncoderInput> = samples.iter().map(|s| s.input.clone()).collect();
        let records = collect_records(&t.state.encoder, &inputs, ForwardMode::Full).map_err(to_py_err)?;
        let mut paths = Vec::new();
        for r in &records {
            let s = &samples[r.row];
            let stem = format!("row{}_layer{}_{}", r.row, r.layer, r.tag.name().to_lowercase());
            let files = export_heatmap(r, None, &s.labels(&t.world.vocab), &s.gold, &out, &stem).map_err(to_py_err)?;
            paths.push(files.csv.display().to_string());
        }
        Ok(paths)
    }
}

/// Parameter counts by component for `model` at the `desk` or `base` size.
#[pyfunction]
#[pyo3(signature = (model, preset = "desk"))]
fn parameter_counts(model: &str, preset: &str) -> PyResult<BTreeMap<String, usize>> {
    let kind = variant(model)?;
    let cfg = match preset {
        "desk" => TrainConfig::desk(kind).model,
        "base" => ModelConfig::paper_base(kind),
        _ => return Err(PyValueError::new_err(format!("unknown preset `{preset}`"))),
    };
    let report = count_parameters(&cfg);
    Ok(report.rows().into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

#[pyfunction]
#[pyo3(signature = (p_t, alpha = 0.25, gamma = 2.0))]
fn focal_weight(p_t: f64, alpha: f64, gamma: f64) -> PyResult<f64> {
    dalab::objectives::focal_weight(p_t, alpha, gamma).map_err(to_py_err)
}

/// The per-language focal exponent for a smoothed loss at `step`.
#[pyfunction]
#[pyo3(signature = (ema_ce, step, loss_threshold = 1.6, start_step = 2_000_000, gamma = 2.0))]
fn gate(ema_ce: f64, step: u64, loss_threshold: f64, start_step: u64, gamma: f64) -> f64 {
    ReweightState::new(ReweightConfig {
        loss_threshold,
        start_step,
        gamma,
        ..Default::default()
    })
    .gate(ema_ce, step)
}

/// Masks `tokens` for prediction; returns `(inputs, targets)` with `-1`
/// marking positions that are not predicted.
#[pyfunction]
#[pyo3(signature = (tokens, vocab_size, rate = 0.15, seed = 0))]
fn mask_tokens(tokens: Vec<usize>, vocab_size: usize, rate: f64, seed: u64) -> PyResult<(Vec<usize>, Vec<i64>)> {
    let vocab = MaskingVocab {
        mask_id: MASK,
        replacements: (NUM_SPECIALS..vocab_size).collect(),
    };
    let ineligible: Vec<bool> = tokens.iter().map(|&t| t < NUM_SPECIALS).collect();
    let plan = plan_masking(&tokens, &ineligible, rate, &vocab, seed).map_err(to_py_err)?;
    Ok((plan.inputs(), plan.targets()))
}

#[pymodule]
pub fn dalab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(parameter_counts, m)?)?;
    m.add_function(wrap_pyfunction!(focal_weight, m)?)?;
    m.add_function(wrap_pyfunction!(gate, m)?)?;
    m.add_function(wrap_pyfunction!(mask_tokens, m)?)?;
    Ok(())
}
