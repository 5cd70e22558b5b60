use std::path::Path;
use std::process::Command;

use abpe::cli::{manifest_path, read_manifest};
use abpe::corpus::{write_feature_file, FeatureMatrix};

fn abpe(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_abpe"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path) {
    let o = abpe(
        dir,
        &["synth-corpus", "--out-tokens", "toks.txt", "--out-symbols", "syms.txt", "--set", "corpus.num_utterances=50"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn bpe_roundtrip_reproduces_token_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    for args in [
        &["bpe-train", "--in", "toks.txt", "--vocab-size", "5000", "--out", "v.vocab"][..],
        &["bpe-encode", "--vocab", "v.vocab", "--in", "toks.txt", "--out", "ids.txt"],
        &["bpe-decode", "--vocab", "v.vocab", "--in", "ids.txt", "--out", "back.txt"],
    ] {
        let o = abpe(d, args);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(d.join("toks.txt")).unwrap(), std::fs::read(d.join("back.txt")).unwrap());
    let m = read_manifest(manifest_path(&d.join("v.vocab"))).unwrap();
    assert_eq!(m.command, "bpe-train");
    assert_eq!(m.config["abpe.vocab_size"], "5000");
    assert_eq!(m.inputs[0].path, "toks.txt");
}

#[test]
fn identical_feature_sets_print_zero_ndb_and_js() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data: Vec<f32> = (0..400 * 2).map(|i| ((i * 37 % 101) as f32).sin()).collect();
    write_feature_file(&FeatureMatrix::new("x", 20.0, 400, 2, data).unwrap(), d.join("x.feat")).unwrap();
    let o = abpe(d, &["eval-ndb-js", "--a", "x.feat", "--b", "x.feat", "--set", "metrics.repeats=2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().last().unwrap(), "NDB 0.000, JS 0.000");
    assert!(d.join("ndb_js.csv").exists());
}

#[test]
fn usage_errors_exit_two_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let o = abpe(d, &["bpe-train", "--in", "toks.txt", "--out", "v", "--set", "abpe.nonsense=1"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[usage] cli:"), "{err}");

    let o = abpe(d, &["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));

    let o = abpe(d, &["bpe-train", "--in", "toks.txt", "--out", "v", "--set", "abpe.vocab_size=lots"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn domain_errors_exit_one_with_module_name() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let o = abpe(d, &["bpe-train", "--in", "toks.txt", "--vocab-size", "10", "--out", "v"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[domain] abpe:"), "{}", stderr(&o));

    let o = abpe(d, &["bpe-train", "--in", "missing.txt", "--out", "v"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[io] abpe:"));
}

#[test]
fn config_file_and_overrides_layer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    std::fs::write(d.join("run.cfg"), "# shared\nabpe.vocab_size = 300\nabpe.min_pair_freq = 3\n").unwrap();
    let o = abpe(
        d,
        &["bpe-train", "--in", "toks.txt", "--out", "v", "--config", "run.cfg", "--set", "abpe.min_pair_freq=2", "--seed", "9"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let m = read_manifest(manifest_path(&d.join("v"))).unwrap();
    assert_eq!(m.config["abpe.vocab_size"], "300");
    assert_eq!(m.config["abpe.min_pair_freq"], "2");
    assert_eq!(m.seed, 9);

    let o = abpe(d, &["bpe-train", "--in", "toks.txt", "--out", "v", "--config", "run.cfg", "--vocab-size", "260"]);
    assert!(o.status.success());
    let m = read_manifest(manifest_path(&d.join("v"))).unwrap();
    assert_eq!(m.config["abpe.vocab_size"], "260");
}

#[test]
fn replay_detects_changed_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let o = abpe(d, &["bpe-stats", "--vocab", "missing", "--in", "toks.txt", "--out", "s.csv"]);
    assert_eq!(o.status.code(), Some(1));

    assert!(abpe(d, &["bpe-train", "--in", "toks.txt", "--vocab-size", "300", "--out", "v"]).status.success());
    let o = abpe(d, &["replay", "--manifest", "v.manifest.json"]);
    assert!(o.status.success(), "{}", stderr(&o));

    // tamper with the recorded hash
    let path = d.join("v.manifest.json");
    let mut m = read_manifest(&path).unwrap();
    m.outputs[0].sha256 = "0".repeat(64);
    std::fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
    let o = abpe(d, &["replay", "--manifest", "v.manifest.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("outputs differ"));
}

#[test]
fn wer_and_mcd_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("ref.txt"), "a\tthe cat sat\nb\ton the mat\n").unwrap();
    std::fs::write(d.join("hyp.txt"), "a\tthe cat sat\nb\ton a mat today\n").unwrap();
    let o = abpe(d, &["eval-wer", "--ref", "ref.txt", "--hyp", "hyp.txt", "--out", "w.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "WER 0.3333");

    let m = FeatureMatrix::new("m", 20.0, 3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    write_feature_file(&m, d.join("m.feat")).unwrap();
    let o = abpe(d, &["eval-mcd", "--ref", "m.feat", "--hyp", "m.feat", "--out", "mcd.csv"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "MCD 0.0000");
}
