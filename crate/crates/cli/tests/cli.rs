use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spatialflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "\
seed = 3

[net]
num_blocks = 1
hidden_dim = 16
num_heads = 2
time_embed_dim = 8

[train]
steps = 4
batch_size = 2
checkpoint_every = 2

[solver]
method = euler
steps = 4
";

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["infer", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["bogus"])), 1);
    assert_eq!(code(&run(&["infer", "--input", "x.wav"])), 1);
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "[train]\nwarp_speed = 9\n").unwrap();
    let out = run(&["make-hrir", "--config", p(&cfg), "--out", p(&dir.path().join("h"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp_speed"));
}

#[test]
fn missing_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "downmix",
        "--input",
        p(&dir.path().join("absent.wav")),
        "--out",
        p(&dir.path().join("o.wav")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn full_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let c = p(&cfg);
    let ok = |args: &[&str]| {
        let out = run(args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8_lossy(&out.stdout).into_owned()
    };

    ok(&["make-scenes", "--config", c, "--count", "4", "--out", p(&d.join("scenes"))]);
    let prepared = ok(&["prepare", "--config", c, "--input", p(&d.join("scenes")), "--out", p(&d.join("data"))]);
    assert!(prepared.contains("prepared 4 clips"));
    assert!(d.join("data/manifest.tsv").is_file());

    let trained = ok(&[
        "train",
        "--config",
        c,
        "--manifest",
        p(&d.join("data/manifest.tsv")),
        "--out",
        p(&d.join("ckpt")),
    ]);
    assert!(trained.contains("trained steps 1..4"));
    let ck = d.join("ckpt/final.ifck");
    assert!(ck.is_file());

    ok(&["make-scenes", "--config", c, "--seed", "77", "--count", "1", "--render", "--out", p(&d.join("held"))]);
    let truth = d.join("held/scene_000.wav");
    let stereo = d.join("stereo.wav");
    ok(&["downmix", "--config", c, "--input", p(&truth), "--out", p(&stereo)]);
    let gen = d.join("gen.wav");
    ok(&["infer", "--config", c, "--checkpoint", p(&ck), "--input", p(&stereo), "--out", p(&gen)]);
    assert!(gen.is_file());
    assert!(d.join("gen.wav.cfg").is_file());

    let report = ok(&["eval", "--config", c, "--reference", p(&truth), "--generated", p(&gen), "--out", p(&d.join("eval.tsv"))]);
    assert!(report.lines().count() > 12);

    ok(&["binauralize", "--config", c, "--input", p(&gen), "--out", p(&d.join("bin_a.wav"))]);
    ok(&["make-hrir", "--config", c, "--out", p(&d.join("set.hrir"))]);
    ok(&[
        "binauralize",
        "--config",
        c,
        "--input",
        p(&gen),
        "--hrir",
        p(&d.join("set.hrir")),
        "--out",
        p(&d.join("bin_b.wav")),
    ]);
    assert_eq!(fs::read(d.join("bin_a.wav")).unwrap(), fs::read(d.join("bin_b.wav")).unwrap());
}
