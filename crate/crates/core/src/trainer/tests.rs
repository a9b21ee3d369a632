use super::*;
use crate::error::Error;
use crate::model::{Checkpoint, VariantKind};
use crate::objectives::{total_loss, LossMode};
use crate::tensor::Tape;

fn tiny(kind: VariantKind) -> TrainConfig {
    let mut cfg = TrainConfig::desk(kind);
    cfg.data.corpus_size = 400;
    cfg.data.lexicon_size = 60;
    cfg.data.schedule.max_len = 40;
    cfg.data.schedule.batch_size = 8;
    cfg.optim.batch_size = 8;
    cfg.model.max_positions = 40;
    cfg.optim.lr = 3e-3;
    cfg.optim.warmup_steps = 20;
    cfg.optim.total_steps = 200;
    cfg.seed = 7;
    cfg
}

fn params_bits(t: &Trainer) -> Vec<u32> {
    t.state
        .encoder
        .params
        .iter()
        .flat_map(|(_, x)| x.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn two_hundred_steps_beat_uniform() {
    let mut t = Trainer::new(tiny(VariantKind::Da)).unwrap();
    let reports = t.run(200).unwrap();
    let lnv = (t.world.vocab.len() as f64).ln();
    let tail: Vec<f64> = reports[180..].iter().map(|r| r.mean_ce).collect();
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(mean < lnv, "mean CE {mean} vs ln V {lnv}");
    assert!(mean < reports[0].mean_ce);
    assert_eq!(reports[199].lr, 0.0);
}

#[test]
fn closed_gates_scale_the_trajectory_by_alpha() {
    let mut a = tiny(VariantKind::Ma);
    a.optim.clip_norm = None;
    a.model.dropout_p = 0.0;
    let mut b = a.clone();
    b.objective = LossMode::AdaptiveFl;
    let ra = Trainer::new(a).unwrap().run(20).unwrap();
    let rb = Trainer::new(b).unwrap().run(20).unwrap();
    assert!((rb[0].loss - 0.25 * ra[0].loss).abs() < 1e-6);
    for (x, y) in ra.iter().zip(&rb) {
        assert!((y.loss / x.loss - 0.25).abs() < 1e-3, "step {}: {} vs {}", x.step, x.loss, y.loss);
    }
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let mut a = Trainer::new(tiny(VariantKind::Da)).unwrap();
    let mut b = Trainer::new(tiny(VariantKind::Da)).unwrap();
    a.run(30).unwrap();
    b.run(30).unwrap();
    assert_eq!(params_bits(&a), params_bits(&b));
    let mut other = tiny(VariantKind::Da);
    other.seed = 8;
    let mut c = Trainer::new(other).unwrap();
    c.run(30).unwrap();
    assert_ne!(params_bits(&a), params_bits(&c));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let mut cfg = tiny(VariantKind::Da);
    cfg.objective = LossMode::AdaptiveFl;
    cfg.reweight.start_step = 5;
    cfg.reweight.loss_threshold = 100.0;
    let mut full = Trainer::new(cfg.clone()).unwrap();
    full.run(20).unwrap();

    let mut first = Trainer::new(cfg).unwrap();
    first.run(10).unwrap();
    let mut bytes = Vec::new();
    first.checkpoint().write_to(&mut bytes).unwrap();
    let ck = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    let mut resumed = Trainer::resume(&ck).unwrap();
    assert_eq!(resumed.state.step, 10);
    resumed.run(10).unwrap();

    assert_eq!(params_bits(&resumed), params_bits(&full));
    assert_eq!(resumed.state.moments, full.state.moments);
    assert_eq!(resumed.state.reweight, full.state.reweight);
    assert!(full.state.reweight.entries.values().any(|e| e.gamma_l > 0.0));
}

#[test]
fn every_parameter_receives_gradient() {
    for kind in [VariantKind::Ma, VariantKind::Da, VariantKind::DaReduce, VariantKind::DaShare] {
        let mut cfg = tiny(kind);
        cfg.model.tie_lm_head = false;
        let t = Trainer::new(cfg).unwrap();
        let sched = t.scheduler().unwrap();
        let enc = &t.state.encoder;
        let mut seen = vec![false; enc.params.len()];
        for i in 0..2 {
            let batch = sched.batch(i).unwrap();
            let mut tape = Tape::new();
            let b = enc.bind(&mut tape);
            let l = total_loss(enc, &mut tape, &b, &batch, &t.state.reweight, LossMode::PlainCe, None).unwrap();
            let grads = tape.backward(l.loss).unwrap();
            for (k, v) in b.vars.iter().enumerate() {
                if grads.get(*v).is_some_and(|g| g.iter().any(|&x| x != 0.0)) {
                    seen[k] = true;
                }
            }
        }
        let dead: Vec<&str> = (0..seen.len()).filter(|&k| !seen[k]).map(|k| enc.params.name(k)).collect();
        assert!(dead.is_empty(), "{kind:?}: {dead:?}");
        assert_eq!(crate::model::count_parameters(&enc.cfg).total, enc.params.numel());
    }
}

#[test]
fn divergence_aborts_with_state_dump() {
    let mut cfg = tiny(VariantKind::Ma);
    cfg.optim.lr = 50.0;
    cfg.optim.warmup_steps = 0;
    cfg.optim.clip_norm = None;
    cfg.divergence_factor = 2.0;
    cfg.divergence_window = 5;
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg).unwrap().with_output(dir.path()).unwrap();
    match t.run(200) {
        Err(Error::Divergence { step, .. }) => assert!(step < 199),
        other => panic!("expected divergence, got {other:?}"),
    }
    assert!(dir.path().join("diverged.ckpt").exists());
}

#[test]
fn outputs_are_written() {
    let mut cfg = tiny(VariantKind::DaShare);
    cfg.optim.total_steps = 6;
    cfg.optim.warmup_steps = 2;
    cfg.checkpoint_every = 3;
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg).unwrap().with_output(dir.path()).unwrap();
    t.run_to_end().unwrap();
    for f in ["run_manifest", "loss_log.csv", "step00000003.ckpt", "step00000006.ckpt", "last.ckpt", "final.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(dir.path().join("loss_log.csv")).unwrap();
    assert!(log.lines().count() > 6);
    let manifest = std::fs::read_to_string(dir.path().join("run_manifest")).unwrap();
    assert!(manifest.contains("variant=da-share"));
    assert!(manifest.contains("seed=7"));
    let ck = Checkpoint::load(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(ck.meta["step"], "6");
}
