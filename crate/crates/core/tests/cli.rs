use std::path::Path;
use std::process::{Command, Output};

use expamoe::harness::experiment::{CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, STEP_LOG_FILE, VISITS_FILE};

const TINY: &[&str] = &[
    "--set",
    "data.train_per_class=4",
    "--set",
    "data.validation_per_class=2",
    "--set",
    "pretrain.epochs=1",
    "--set",
    "warmup.epochs=1",
    "--set",
    "stream.rounds=1",
    "--set",
    "stream.batches_per_domain=1",
    "--set",
    "stream.batch_size=4",
    "--set",
    "adapt.batch_size=4",
];

fn expamoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_expamoe"))
        .args(args)
        .env_remove("XPMO_SEED")
        .output()
        .expect("spawn expamoe")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn oracle_reports_agreement() {
    let o = expamoe(&["oracle", "--cases", "20", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("descriptor vs direct DFT: 20 images"));
    assert!(text.contains("0 mismatches"));
}

#[test]
fn pipeline_from_pretraining_to_adaptation() {
    let dir = tempfile::tempdir().unwrap();
    let pre = dir.path().join("pre.xpmo");
    let warm = dir.path().join("warm.xpmo");
    let out = dir.path().join("run");

    let o = expamoe(&[&["pretrain", "-o", path(&pre)], TINY].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("validation_accuracy"));

    let o = expamoe(&[&["warmup", "--checkpoint", path(&pre), "-o", path(&warm)], TINY].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("\"tau\""));

    let o = expamoe(&["inspect-domains", "--checkpoint", path(&warm)]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("domains 1"), "{text}");
    assert!(text.contains("domain 0: count"));

    let o = expamoe(&[&["eval", "--checkpoint", path(&warm), "--policy", "backbone"], TINY].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1 + 4 + 1, "{text}");
    assert!(text.lines().last().unwrap().starts_with("mean,"));

    let o = expamoe(&[&["adapt", "--checkpoint", path(&warm), "-o", path(&out)], TINY].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("mean error"));
    for f in [METRICS_FILE, STEP_LOG_FILE, VISITS_FILE, CHECKPOINT_FILE, CONFIG_FILE] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let steps = std::fs::read_to_string(out.join(STEP_LOG_FILE)).unwrap();
    assert_eq!(steps.lines().count(), 4);

    let o = expamoe(&["inspect-domains", "--checkpoint", path(&out.join(CHECKPOINT_FILE)), "--full"]);
    assert!(o.status.success());

    let o = expamoe(&["warmup", "--checkpoint", path(&warm), "-o", path(&dir.path().join("again.xpmo")), "--set", "nope=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let o = expamoe(&["pretrain", "-o", path(&dir.path().join("x")), "--set", "adapt.nope=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let missing = dir.path().join("missing.xpmo");
    assert_eq!(expamoe(&["inspect-domains", "--checkpoint", path(&missing)]).status.code(), Some(3));

    let garbage = dir.path().join("garbage.xpmo");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(expamoe(&["inspect-domains", "--checkpoint", path(&garbage)]).status.code(), Some(3));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[[stream.domains]]\nkind = \"fog\"\n").unwrap();
    assert_eq!(expamoe(&["pretrain", "-c", path(&cfg), "-o", path(&dir.path().join("y"))]).status.code(), Some(2));

    assert_eq!(expamoe(&["no-such-command"]).status.code(), Some(2));
}
