//! End-to-end runs of the `rccf` binary: every subcommand and the exit-code
//! contract (0 success, 1 usage error, 2 runtime error).

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rccf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rccf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset, short training config and a trained checkpoint.
struct Fixture {
    _dir: tempfile::TempDir,
    data: std::path::PathBuf,
    config: std::path::PathBuf,
    run: std::path::PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = rccf(&["gen-data", "--seed", "5", "--count", "20", "--out-dir", s(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "train\t16\nval\t2\ntest\t2\n");
    let config = dir.path().join("train.cfg");
    fs::write(&config, "steps = 4\nbatch_size = 2\neval_every = 2\nchannels = 4\nbackbone_width = 4\n").unwrap();
    let run = dir.path().join("run");
    let o = rccf(&["train", "--config", s(&config), "--data-dir", s(&data), "--out-dir", s(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    Fixture {
        _dir: dir,
        data,
        config,
        run,
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&rccf(&[])), 1);
    assert_eq!(code(&rccf(&["frobnicate"])), 1);
    assert_eq!(code(&rccf(&["gen-data", "--seed", "x", "--count", "3", "--out-dir", "d"])), 1);
    assert_eq!(code(&rccf(&["infer", "--checkpoint", "c"])), 1);
}

#[test]
fn help_and_version_exit_0() {
    let o = rccf(&["--help"]);
    assert_eq!(code(&o), 0);
    for sub in ["gen-data", "train", "eval", "infer", "ablate", "dump-heatmap"] {
        assert!(stdout(&o).contains(sub), "{sub} missing from help");
    }
    assert_eq!(code(&rccf(&["--version"])), 0);
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let o = rccf(&["train", "--data-dir", s(&missing), "--out-dir", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "steps = 3\nwarp_factor = 9\n").unwrap();
    let o = rccf(&["train", "--config", s(&bad), "--data-dir", s(&missing), "--out-dir", s(&missing)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warp_factor"));

    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = rccf(&["infer", "--checkpoint", s(&junk), "--image", s(&junk), "--expression", "red circle"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn full_workflow() {
    let f = fixture();
    let ckpt = f.run.join("model.ckpt");
    for name in ["config.txt", "metrics.tsv", "eval.tsv", "model.ckpt"] {
        assert!(f.run.join(name).is_file(), "{name} missing");
    }
    let metrics = fs::read_to_string(f.run.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);

    // eval: report on stdout and in the output directory.
    let out = f.run.join("eval");
    let o = rccf(&[
        "eval", "--checkpoint", s(&ckpt), "--data-dir", s(&f.data), "--split", "val", "--split", "test",
        "--out-dir", s(&out), "--repeats", "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("split\tcount\tprec@0.5\tmean_iou\nval\t2\t"), "{text}");
    for name in ["report.tsv", "summary.json", "timing.tsv", "predictions-val.tsv", "predictions-test.tsv"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let o = rccf(&["eval", "--checkpoint", s(&ckpt), "--data-dir", s(&f.data), "--split", "nope"]);
    assert_eq!(code(&o), 2);

    // infer: five numbers, the box inside the 64x64 frame.
    let image = f.data.join("images").join("000018.ppm");
    let annotations = fs::read_to_string(f.data.join("annotations.txt")).unwrap();
    let expr = annotations.lines().nth(18).unwrap().split('\t').nth(1).unwrap().to_string();
    let o = rccf(&["infer", "--checkpoint", s(&ckpt), "--image", s(&image), "--expression", &expr]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let nums: Vec<f64> = stdout(&o).split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert_eq!(nums.len(), 5);
    assert!(nums[..4].iter().all(|&v| (0.0..=64.0).contains(&v)));
    assert!(nums[0] <= nums[2] && nums[1] <= nums[3]);
    assert!(nums[4] > 0.0 && nums[4] < 1.0);
    let o = rccf(&["infer", "--checkpoint", s(&ckpt), "--image", s(&image), "--expression", "zebra"]);
    assert_eq!(code(&o), 0, "unknown words fall back to <unk>");
    let o = rccf(&["infer", "--checkpoint", s(&ckpt), "--image", s(&image), "--expression", " ?! "]);
    assert_eq!(code(&o), 2);

    // dump-heatmap agrees with infer.
    let pgm = f.run.join("heat.pgm");
    let o = rccf(&["dump-heatmap", "--checkpoint", s(&ckpt), "--image", s(&image), "--expression", &expr, "--out", s(&pgm)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5"));
    let side = fs::read_to_string(f.run.join("heat.txt")).unwrap();
    assert!(side.starts_with("box = "));
    let infer_line = stdout(&rccf(&["infer", "--checkpoint", s(&ckpt), "--image", s(&image), "--expression", &expr]));
    let dump_line = stdout(&o);
    let dump_tail: Vec<&str> = dump_line.split_whitespace().skip(2).collect();
    assert_eq!(dump_tail, infer_line.split_whitespace().collect::<Vec<_>>());

    // resume: continuing a finished run changes nothing but must accept the same config.
    let resumed = f.run.join("resumed");
    let o = rccf(&[
        "train", "--config", s(&f.config), "--data-dir", s(&f.data), "--out-dir", s(&resumed), "--resume", s(&ckpt),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(resumed.join("model.ckpt")).unwrap(), fs::read(&ckpt).unwrap());
    let other = f.run.join("other.cfg");
    fs::write(&other, "steps = 9\n").unwrap();
    let o = rccf(&[
        "train", "--config", s(&other), "--data-dir", s(&f.data), "--out-dir", s(&resumed), "--resume", s(&ckpt),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn training_is_reproducible() {
    let a = fixture();
    let b = fixture();
    for name in ["model.ckpt", "metrics.tsv", "eval.tsv", "config.txt"] {
        assert_eq!(fs::read(a.run.join(name)).unwrap(), fs::read(b.run.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn ablate_writes_seven_rows() {
    let f = fixture();
    let cfg = f.run.join("ablate.cfg");
    fs::write(&cfg, "steps = 2\nbatch_size = 2\neval_every = 0\nchannels = 4\nbackbone_width = 4\n").unwrap();
    let out = f.run.join("ablation");
    let o = rccf(&["ablate", "--config", s(&cfg), "--data-dir", s(&f.data), "--out-dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("ablation.tsv")).unwrap();
    assert_eq!(table, stdout(&o));
    let rows: Vec<&str> = table.lines().skip(1).take_while(|l| !l.is_empty()).collect();
    assert_eq!(rows.len(), 7);
    assert!(rows[0].starts_with("main (average fusion)\t7\t2\ttest\t2\t"));
    assert_eq!(table.matches("# expectation:").count(), 2);
}

#[test]
fn gen_data_honours_split_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = rccf(&["gen-data", "--seed", "1", "--count", "6", "--val", "0", "--test", "2", "--out-dir", s(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "train\t4\nval\t0\ntest\t2\n");
    let o = rccf(&["gen-data", "--seed", "1", "--count", "3", "--val", "2", "--test", "2", "--out-dir", s(&out)]);
    assert_eq!(code(&o), 2);
}
