use pyo3::prelude::*;
use pyo3::types::PyDict;
use pyo3::wrap_pymodule;

fn with_module(code: &str) {
    Python::attach(|py| {
        let m = wrap_pymodule!(dalab_py::dalab_py)(py);
        let globals = PyDict::new(py);
        globals.set_item("dalab", m).unwrap();
        let code = std::ffi::CString::new(code).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn functions() {
    with_module(
        r#"
assert abs(dalab.focal_weight(0.9) - 0.0025) < 1e-15
assert dalab.focal_weight(0.3, 1.0, 0.0) == 1.0
assert dalab.gate(1.0, 2_000_000) == 2.0
assert dalab.gate(1.0, 1_999_999) == 0.0
assert dalab.gate(1.7, 3_000_000) == 0.0
ma = dalab.parameter_counts("ma")
share = dalab.parameter_counts("da-share")
da = dalab.parameter_counts("da")
assert ma["total"] == share["total"] < da["total"]
toks = [1] + list(range(5, 205)) + [2]
inputs, targets = dalab.mask_tokens(toks, 300, 0.5, 3)
assert len(inputs) == len(targets) == len(toks)
assert targets[0] == -1 and targets[-1] == -1
assert all(t == -1 or t == o for t, o in zip(targets, toks))
try:
    dalab.focal_weight(1.5)
    raise AssertionError("expected ArithmeticError")
except ArithmeticError:
    pass
"#,
    );
}

#[test]
fn trainer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let code = format!(
        r#"
over = {{"corpus_size": "300", "lexicon_size": "60", "batch_size": "8", "max_len": "32", "max_positions": "32", "total_steps": "6", "warmup_steps": "2"}}
t = dalab.Trainer("da", seed=2, overrides=over)
reports = t.run(3)
assert [r[0] for r in reports] == [0, 1, 2]
assert t.step == 3
assert t.config["seed"] == "2"
path = r"{dir}/t.ckpt"
t.save(path)
u = dalab.Trainer.load(path)
assert u.step == 3
a = t.run(3)
b = u.run(3)
assert a == b
layers = t.alignment(5)
assert len(layers) == 2 and all(0.0 <= acc <= 1.0 for _, acc, _ in layers)
files = t.heatmaps(r"{dir}/maps", 1)
assert len(files) == 4
try:
    t.mass(5)
    raise AssertionError("mass needs mixed attention")
except ValueError:
    pass
try:
    dalab.Trainer("xa")
    raise AssertionError("expected ValueError")
except ValueError:
    pass
"#,
        dir = dir.path().display()
    );
    with_module(&code);
}
