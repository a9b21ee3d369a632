//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Criteria 7 to 9 train 8 seeds of each attention variant and
//! dominate the runtime.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dalab::analysis::{
    all_variants, collect_records, evaluate_alignment, evaluate_mass, export_heatmap, pair_samples, param_report,
    probe_pair_classification, read_heatmap_csv, ProbeKind, ProbeTask,
};
use dalab::corpus::{
    build_bilingual_example, generate_base_corpus, make_batch, Batch, DataType, Example, Grammar, GrammarConfig, World,
    MASK, NUM_SPECIALS,
};
use dalab::model::{Bound, Checkpoint, Encoder, EncoderInput, ForwardMode, ForwardOptions, ModelConfig, VariantKind};
use dalab::objectives::{
    batch_loss, plan_masking, LossKey, LossMode, MaskAction, MaskingVocab, ReweightConfig, ReweightState, Weighting,
};
use dalab::tensor::{finite_diff_check, Tape, Tensor};
use dalab::trainer::{TrainConfig, Trainer};
use dalab::{Error, Result};

const SEEDS: u64 = 8;
const TRAIN_STEPS: u64 = 2500;
const EVAL_PAIRS: usize = 200;
const DA_TARGET: f64 = 0.8;

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
}

fn check(id: usize, name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Line {
    let start = Instant::now();
    let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    let line = Line {
        id,
        name,
        pass,
        detail,
        secs: start.elapsed().as_secs_f64(),
    };
    println!(
        "criterion {:>2} {} {}: {} [{:.1}s]",
        line.id,
        if line.pass { "PASS" } else { "FAIL" },
        line.name,
        line.detail,
        line.secs
    );
    line
}

fn small_world(seed: u64, sentences: usize) -> Result<(World, Vec<Vec<usize>>)> {
    let g = Grammar::new(GrammarConfig::new(60, 1.1))?;
    let base = generate_base_corpus(&g, seed, sentences);
    Ok((World::standard(g, seed, 3)?, base))
}

fn bilingual_batch(w: &World, base: &[Vec<usize>], src: usize, tgt: usize, rate: f64, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let ex = base
        .iter()
        .map(|s| Ok(Example::Parallel(build_bilingual_example(s, w.language(src)?, w.language(tgt)?)?)))
        .collect::<Result<Vec<_>>>()?;
    make_batch(&ex, DataType::Bilingual, &w.vocab, 64, rate, rng)
}

fn gradient_soundness() -> Result<(bool, String)> {
    let (w, base) = small_world(11, 8)?;
    let mut cfg = ModelConfig::sized(VariantKind::Da, w.vocab.len(), w.num_languages(), 8, 2, 2, 16, 64);
    cfg.dropout_p = 0.0;
    cfg.init_std = 0.5;
    let enc = Encoder::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(12))?;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let batch = bilingual_batch(&w, &base[..3], 0, 2, 0.4, &mut rng)?;

    // language 0 open, language 2 closed
    let mut state = ReweightState::new(ReweightConfig {
        start_step: 0,
        ..Default::default()
    });
    let key = |language| LossKey {
        language,
        data_type: DataType::Bilingual,
    };
    state.set_ema(key(0), 1.0, 10);
    state.set_ema(key(2), 5.0, 10);
    let mut tape = Tape::new();
    let b = enc.bind(&mut tape);
    let base_loss = batch_loss(&enc, &mut tape, &b, &batch, Weighting::Mode(LossMode::AdaptiveFl, &state), None)?;
    let weights = base_loss.weights.clone();
    let open = weights.iter().filter(|&&x| x < 0.25).count();
    let closed = weights.iter().filter(|&&x| x == 0.25).count();
    if open == 0 || closed == 0 {
        return Ok((false, format!("batch lacks both gate states ({open} open, {closed} closed)")));
    }

    let inputs: Vec<Tensor<f64>> = enc.params.iter().map(|(_, t)| t.clone()).collect();
    let report = finite_diff_check(
        |tape, vars| {
            let b = Bound { vars: vars.to_vec() };
            Ok(batch_loss(&enc, tape, &b, &batch, Weighting::Fixed(&weights), None)?.loss)
        },
        &inputs,
        1e-5,
    )?;
    let ok = report.max_relative_error < 1e-4;
    Ok((
        ok,
        format!(
            "max relative error {:.2e} over {} coordinates in {} tensors ({open} open-gate and {closed} closed-gate positions)",
            report.max_relative_error,
            report.coordinates,
            inputs.len()
        ),
    ))
}

fn masking_invariants() -> Result<(bool, String)> {
    let (w, base) = small_world(21, 400)?;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst_forbidden = 0.0f64;
    let mut worst_sum = 0.0f64;
    let mut records = 0usize;
    let mut enc = None;
    for i in 0..1000 {
        if i % 100 == 0 {
            let kind = [VariantKind::Da, VariantKind::DaShare][i / 100 % 2];
            let mut cfg = ModelConfig::desk(kind, w.vocab.len(), w.num_languages());
            cfg.max_positions = 64;
            enc = Some(Encoder::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(i as u64))?);
        }
        let enc = enc.as_ref().expect("encoder");
        let n = rng.random_range(1..=6);
        let rows: Vec<Vec<usize>> = (0..n).map(|_| base[rng.random_range(0..base.len())].clone()).collect();
        let src = rng.random_range(0..3);
        let tgt = (src + rng.random_range(1..3)) % 3;
        let batch = bilingual_batch(&w, &rows, src, tgt, 0.15, &mut rng)?;
        let mut tape = Tape::new();
        let b = enc.bind(&mut tape);
        let out = enc.forward(&mut tape, &b, &batch.inputs, ForwardOptions::eval(ForwardMode::Full, true))?;
        for r in &out.records {
            worst_forbidden = worst_forbidden.max(r.max_forbidden_mass());
            worst_sum = worst_sum.max(r.max_row_sum_error());
            records += 1;
        }
    }
    Ok((
        worst_forbidden == 0.0 && worst_sum <= 1e-5,
        format!("{records} IA/CA records: max forbidden mass {worst_forbidden:e}, max |row sum - 1| {worst_sum:.2e}"),
    ))
}

fn loss_reductions() -> Result<(bool, String)> {
    let (w, base) = small_world(31, 6)?;
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut notes = Vec::new();
    let mut ok = true;
    for kind in [VariantKind::Ma, VariantKind::Da] {
        let mut cfg = ModelConfig::sized(kind, w.vocab.len(), w.num_languages(), 16, 2, 2, 32, 64);
        cfg.dropout_p = 0.0;
        cfg.init_std = 0.3;
        let enc = Encoder::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(33))?;
        let batch = bilingual_batch(&w, &base[..4], 0, 2, 0.3, &mut rng)?;
        let loss = |weighting: Weighting<'_>| -> Result<f64> {
            let mut tape = Tape::new();
            let b = enc.bind(&mut tape);
            Ok(batch_loss(&enc, &mut tape, &b, &batch, weighting, None)?.total)
        };
        let closed = ReweightState::new(ReweightConfig::default());
        let unit = ReweightState::new(ReweightConfig {
            alpha: 1.0,
            gamma: 0.0,
            ..Default::default()
        });
        let plain = loss(Weighting::Mode(LossMode::PlainCe, &closed))?;
        let focal_unit = loss(Weighting::Mode(LossMode::NaiveFl, &unit))?;
        let adaptive_closed = loss(Weighting::Mode(LossMode::AdaptiveFl, &closed))?;
        let mut open = closed.clone();
        for language in 0..w.num_languages() {
            open.set_ema(
                LossKey {
                    language,
                    data_type: DataType::Bilingual,
                },
                0.0,
                u64::MAX,
            );
        }
        let naive = loss(Weighting::Mode(LossMode::NaiveFl, &closed))?;
        let adaptive_open = loss(Weighting::Mode(LossMode::AdaptiveFl, &open))?;
        let a = plain.to_bits() == focal_unit.to_bits();
        let b = (adaptive_closed - 0.25 * plain).abs() < 1e-6;
        let c = naive.to_bits() == adaptive_open.to_bits();
        ok &= a && b && c;
        notes.push(format!(
            "{kind}: ce==fl(1,0) {a}, |closed-0.25ce|={:.1e}, naive==open {c}",
            (adaptive_closed - 0.25 * plain).abs()
        ));
    }
    Ok((ok, notes.join("; ")))
}

fn gate_state_machine() -> Result<(bool, String)> {
    let key = LossKey {
        language: 1,
        data_type: DataType::Mono,
    };
    let cfg = ReweightConfig::default();
    let mut cases = 0;
    let mut ok = true;
    for (ema, low) in [(1.2, true), (1.6, true), (1.61, false), (3.0, false)] {
        for (step, late) in [(0, false), (1_999_999, false), (2_000_000, true), (5_000_000, true)] {
            let mut s = ReweightState::new(cfg);
            s.set_ema(key, ema, step);
            let want = if low && late { cfg.gamma } else { 0.0 };
            ok &= s.gamma_for(key) == want && s.gate(ema, step) == want;
            cases += 1;
        }
    }
    // re-closing once the average climbs back over the threshold
    let mut s = ReweightState::new(ReweightConfig {
        start_step: 0,
        ema_decay: 0.5,
        ..cfg
    });
    s.observe(key, 1.0, 1);
    let opened = s.gamma_for(key) == cfg.gamma;
    s.observe(key, 4.0, 2);
    let reclosed = s.gamma_for(key) == 0.0 && s.entries[&key].ema_ce == 2.5;
    s.observe(key, 0.5, 3);
    let reopened = s.gamma_for(key) == cfg.gamma;
    ok &= opened && reclosed && reopened;
    Ok((
        ok,
        format!("{cases} grid cases; open {opened}, re-close {reclosed}, re-open {reopened}"),
    ))
}

fn masking_statistics() -> Result<(bool, String)> {
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(NUM_SPECIALS..300)).collect();
    let vocab = MaskingVocab {
        mask_id: MASK,
        replacements: (NUM_SPECIALS..300).collect(),
    };
    let plan = plan_masking(&tokens, &vec![false; n], 0.15, &vocab, 42)?;
    let mut counts = [0usize; 3];
    for a in &plan.actions {
        match a {
            MaskAction::MaskToken => counts[0] += 1,
            MaskAction::RandomToken(_) => counts[1] += 1,
            MaskAction::KeepButPredict => counts[2] += 1,
            MaskAction::KeepVisible => {}
        }
    }
    let selected: usize = counts.iter().sum();
    let rate = 100.0 * selected as f64 / n as f64;
    let split: Vec<f64> = counts.iter().map(|&c| 100.0 * c as f64 / selected as f64).collect();
    let ok = (rate - 15.0).abs() <= 0.5
        && (split[0] - 80.0).abs() <= 1.0
        && (split[1] - 10.0).abs() <= 1.0
        && (split[2] - 10.0).abs() <= 1.0;
    Ok((
        ok,
        format!(
            "selected {rate:.2}%, split {:.2}/{:.2}/{:.2}% over {n} tokens",
            split[0], split[1], split[2]
        ),
    ))
}

fn parameter_relations() -> Result<(bool, String)> {
    let desk = param_report(&all_variants(|k| ModelConfig::desk(k, 293, 3)))?;
    let base = param_report(&all_variants(ModelConfig::paper_base))?;
    let mut notes = Vec::new();
    let mut ok = true;
    for (name, t) in [("desk", &desk), ("base", &base)] {
        let r = t.check_relations();
        ok &= r.is_ok();
        let totals: Vec<String> = t.columns.iter().map(|(k, r)| format!("{k}={}", r.total)).collect();
        notes.push(format!("{name}: {}{}", totals.join(" "), r.err().map_or(String::new(), |e| format!(" ({e})"))));
    }
    Ok((ok, notes.join("; ")))
}

fn desk_run(kind: VariantKind, seed: u64) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::desk(kind);
    let mut kv = BTreeMap::new();
    for (k, v) in [
        ("total_steps", TRAIN_STEPS.to_string()),
        ("warmup_steps", "200".to_string()),
        ("lr", "0.003".to_string()),
        ("max_len", "32".to_string()),
        ("max_positions", "32".to_string()),
        ("mono_languages", "0,2".to_string()),
        ("pairs", "0-2,2-0".to_string()),
        ("seed", seed.to_string()),
    ] {
        kv.insert(k.to_string(), v);
    }
    cfg.apply_kv(&kv)?;
    Ok(cfg)
}

#[derive(Default)]
struct SeedResults {
    da_align: Vec<f64>,
    ma_align: Vec<f64>,
    baseline: Vec<f64>,
    ma_mass: Vec<(f64, f64)>,
    da_probe: Vec<f64>,
    ma_probe: Vec<f64>,
    train_secs: f64,
    probe_secs: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(",")
}

fn train_seeds() -> Result<SeedResults> {
    let mut out = SeedResults::default();
    for seed in 0..SEEDS {
        for kind in [VariantKind::Da, VariantKind::Ma] {
            let start = Instant::now();
            let mut t = Trainer::new(desk_run(kind, seed)?)?;
            t.run_to_end()?;
            let enc = &t.state.encoder;
            let held_out = generate_base_corpus(&t.world.grammar, t.cfg.data.corpus_seed + 1, EVAL_PAIRS);
            let samples = pair_samples(&t.world, &held_out, 0, 2, t.cfg.data.schedule.max_len)?;
            let (_, score) = evaluate_alignment(enc, &samples)?.last();
            if kind == VariantKind::Ma {
                let mass = evaluate_mass(enc, &samples)?;
                let k = mass.len() as f64;
                out.ma_mass.push((mass.iter().map(|m| m.1).sum::<f64>() / k, mass.iter().map(|m| m.2).sum::<f64>() / k));
                out.ma_align.push(score.accuracy);
            } else {
                out.da_align.push(score.accuracy);
                out.baseline.push(score.uniform_baseline());
            }
            out.train_secs += start.elapsed().as_secs_f64();

            let start = Instant::now();
            let probe_base = generate_base_corpus(&t.world.grammar, t.cfg.data.corpus_seed + 2, 2000);
            let task = ProbeTask::new(ProbeKind::PairClassification, 0, vec![2]);
            let o = probe_pair_classification(enc, &t.world, &probe_base, &task, seed)?;
            let acc = o.zero_shot[0].1;
            match kind {
                VariantKind::Ma => out.ma_probe.push(acc),
                _ => out.da_probe.push(acc),
            }
            out.probe_secs += start.elapsed().as_secs_f64();
            eprintln!(
                "  seed {seed} {kind}: alignment {:.3} (uniform {:.3}), probe zero-shot {acc:.3} in-language {:.3}",
                score.accuracy,
                score.uniform_baseline(),
                o.in_language
            );
        }
    }
    Ok(out)
}

fn determinism() -> Result<(bool, String)> {
    let mut cfg = TrainConfig::desk(VariantKind::Da);
    cfg.data.corpus_size = 400;
    cfg.data.schedule.max_len = 32;
    cfg.model.max_positions = 32;
    cfg.data.schedule.batch_size = 8;
    cfg.optim.batch_size = 8;
    cfg.optim.total_steps = 30;
    cfg.optim.warmup_steps = 5;
    cfg.objective = LossMode::AdaptiveFl;
    cfg.reweight.start_step = 5;
    cfg.reweight.loss_threshold = 100.0;
    cfg.seed = 3;
    let bytes = |t: &Trainer| -> Result<Vec<u8>> {
        let mut b = Vec::new();
        t.checkpoint().write_to(&mut b)?;
        Ok(b)
    };
    let dir = tempfile::tempdir()?;
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let mut t = Trainer::new(cfg.clone())?.with_output(&dir.path().join(run))?;
        t.run_to_end()?;
        files.push(std::fs::read(dir.path().join(run).join("final.ckpt"))?);
    }
    let identical = files[0] == files[1];

    let mut straight = Trainer::new(cfg.clone())?;
    straight.run(20)?;
    let mut first = Trainer::new(cfg.clone())?;
    first.run(10)?;
    let ck = Checkpoint::read_from(&mut bytes(&first)?.as_slice())?;
    let mut resumed = Trainer::resume(&ck)?;
    resumed.run(10)?;
    let resumed_ok = bytes(&resumed)? == bytes(&straight)?;

    let enc = &straight.state.encoder;
    let held_out = generate_base_corpus(&straight.world.grammar, 9, 3);
    let samples = pair_samples(&straight.world, &held_out, 0, 2, 32)?;
    let inputs: Vec<EncoderInput> = samples.iter().map(|s| s.input.clone()).collect();
    let mut worst = 0.0f64;
    let mut maps = 0;
    for r in collect_records(enc, &inputs, ForwardMode::Full)? {
        let s = &samples[r.row];
        let files = export_heatmap(&r, None, &s.labels(&straight.world.vocab), &s.gold, dir.path(), &format!("h{maps}"))?;
        let back = read_heatmap_csv(&files.csv)?;
        let mean = r.head_mean();
        if back.probs.len() != mean.len() {
            return Err(Error::Format("heatmap size changed in round trip".into()));
        }
        for (a, b) in back.probs.iter().zip(&mean) {
            worst = worst.max((a - b).abs());
        }
        maps += 1;
    }
    Ok((
        identical && resumed_ok && worst <= 1e-6,
        format!(
            "two runs identical {identical} ({} bytes), resume over 10 steps bitwise {resumed_ok}, {maps} heatmaps max round-trip error {worst:.1e}",
            files[0].len()
        ),
    ))
}

fn main() -> ExitCode {
    let mut lines = vec![
        check(1, "gradient soundness", gradient_soundness),
        check(2, "attention masking invariants", masking_invariants),
        check(3, "focal and adaptive reductions", loss_reductions),
        check(4, "gate state machine", gate_state_machine),
        check(5, "masking statistics", masking_statistics),
        check(6, "parameter relations", parameter_relations),
    ];

    eprintln!("training {SEEDS} seeds x {{DA, MA}} for {TRAIN_STEPS} steps");
    let results = train_seeds();
    let shared = |f: &dyn Fn(&SeedResults) -> (bool, String)| -> Result<(bool, String)> {
        match &results {
            Ok(r) => Ok(f(r)),
            Err(e) => Err(Error::Data(format!("training failed: {e}"))),
        }
    };
    lines.push(check(7, "alignment accuracy DA > MA > uniform", || {
        shared(&|r| {
            let (da, ma, u) = (mean(&r.da_align), mean(&r.ma_align), mean(&r.baseline));
            let in_time = r.train_secs <= 1800.0;
            (
                da > ma && ma > u && da >= DA_TARGET && in_time,
                format!(
                    "DA mean {da:.3} [{}], MA mean {ma:.3} [{}], uniform {u:.3}, DA target {DA_TARGET}; training {:.0}s",
                    fmt_list(&r.da_align),
                    fmt_list(&r.ma_align),
                    r.train_secs
                ),
            )
        })
    }));
    lines.push(check(8, "MA intra-lingual mass exceeds cross-lingual", || {
        shared(&|r| {
            let intra: Vec<f64> = r.ma_mass.iter().map(|m| m.0).collect();
            let cross: Vec<f64> = r.ma_mass.iter().map(|m| m.1).collect();
            (
                mean(&intra) > mean(&cross),
                format!(
                    "intra mean {:.3} [{}], cross mean {:.3} [{}]",
                    mean(&intra),
                    fmt_list(&intra),
                    mean(&cross),
                    fmt_list(&cross)
                ),
            )
        })
    }));
    lines.push(check(9, "zero-shot pair probe DA >= MA", || {
        shared(&|r| {
            let (da, ma) = (mean(&r.da_probe), mean(&r.ma_probe));
            (
                da >= ma && r.probe_secs <= 1200.0,
                format!(
                    "A -> C zero-shot DA mean {da:.3} [{}], MA mean {ma:.3} [{}]; probes {:.0}s",
                    fmt_list(&r.da_probe),
                    fmt_list(&r.ma_probe),
                    r.probe_secs
                ),
            )
        })
    }));
    lines.push(check(10, "determinism and persistence", determinism));

    let failed: Vec<usize> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    if failed.is_empty() {
        println!("all {} criteria passed", lines.len());
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
