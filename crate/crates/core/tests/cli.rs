use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use duralign::data::{decode_corpus, generate_corpus, SyntheticCorpusSpec};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_duralign"));
    c.env_remove("DURALIGN_PRECISION");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn duralign")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Directory with a default corpus at `c.bin` and a 30-step checkpoint at `m.ckpt`.
fn trained() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gen-data", "--out", "c.bin"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(
        dir.path(),
        &[
            "train", "--data", "c.bin", "--out", "m.ckpt", "--steps", "30",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let p = dir.path().to_path_buf();
    (dir, p)
}

fn durations(dir: &Path, prefix: &str) -> Vec<f64> {
    std::fs::read_to_string(dir.join(format!("{prefix}.durations.csv")))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect()
}

fn frames_line(o: &Output) -> usize {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("frames "))
        .expect("frame count line")
        .parse()
        .unwrap()
}

#[test]
fn gen_data_default_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a.bin", "b.bin"] {
        let o = run(dir.path(), &["gen-data", "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("# resolved config"));
    }
    let a = std::fs::read(dir.path().join("a.bin")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.bin")).unwrap());
    let corpus = decode_corpus(&a).unwrap();
    assert_eq!(corpus.len(), 200);
    assert_eq!(
        corpus,
        generate_corpus(&SyntheticCorpusSpec::default()).unwrap()
    );
}

#[test]
fn gen_data_spec_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("s.cfg"),
        "# small\nutterances = 12\nseed = 5\n",
    )
    .unwrap();
    let o = run(
        dir.path(),
        &[
            "gen-data",
            "--spec",
            "s.cfg",
            "--out",
            "c.bin",
            "--max-tokens",
            "4",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("max_tokens = 4"));
    let corpus = decode_corpus(&std::fs::read(dir.path().join("c.bin")).unwrap()).unwrap();
    assert_eq!(corpus.len(), 12);
    assert!(corpus.iter().all(|u| u.tokens() <= 4));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.cfg"),
        "utterances = 3\nspeaker_count = 4\n",
    )
    .unwrap();
    let o = run(
        dir.path(),
        &["gen-data", "--spec", "bad.cfg", "--out", "c.bin"],
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("speaker_count"));
    assert!(!dir.path().join("c.bin").exists());

    let o = run(dir.path(), &["gen-data", "--out", "c.bin", "--gamma", "-1"]);
    assert_eq!(code(&o), 2);
    let o = run(
        dir.path(),
        &["gen-data", "--out", "c.bin", "--no-such-flag", "1"],
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no-such-flag"));
    let o = bin()
        .current_dir(dir.path())
        .env("DURALIGN_PRECISION", "16")
        .args(["train", "--data", "c.bin", "--out", "m", "--steps", "1"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gen-data", "--out", "missing/dir/c.bin"]);
    assert_eq!(code(&o), 3);
    let o = run(
        dir.path(),
        &["train", "--data", "nope.bin", "--out", "m", "--steps", "1"],
    );
    assert_eq!(code(&o), 3);
    let o = run(
        dir.path(),
        &["gen-data", "--spec", "nope.cfg", "--out", "c.bin"],
    );
    assert_eq!(code(&o), 3);
}

#[test]
fn train_loss_csv_and_zero_steps() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        code(&run(
            d,
            &["gen-data", "--out", "c.bin", "--utterances", "40"]
        )),
        0
    );
    for (steps, lines) in [(0usize, 0usize), (1, 1), (10, 1), (11, 2), (25, 3)] {
        let out = format!("m{steps}.ckpt");
        let o = run(
            d,
            &[
                "train",
                "--data",
                "c.bin",
                "--out",
                &out,
                "--steps",
                &steps.to_string(),
            ],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let csv = std::fs::read_to_string(d.join(format!("{out}.losses.csv"))).unwrap();
        let mut it = csv.lines();
        assert_eq!(it.next(), Some("step,spec,dur,kl,beta,total"));
        let body: Vec<&str> = it.collect();
        assert_eq!(body.len(), lines, "steps {steps}");
        for (n, l) in body.iter().enumerate() {
            assert!(l.starts_with(&format!("{},", 10 * n + 1)));
            assert_eq!(l.split(',').count(), 6);
        }
        assert!(d.join(&out).exists());
    }
    let o = run(
        d,
        &[
            "train",
            "--data",
            "c.bin",
            "--out",
            "m.ckpt",
            "--steps",
            "2",
            "--feature-dim",
            "5",
        ],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn infer_scale_and_span() {
    let (_tmp, d) = trained();
    let ck = "m.ckpt";
    let plain = run(
        &d,
        &[
            "infer",
            "--checkpoint",
            ck,
            "--tokens",
            "3,1,4,1,5",
            "--out",
            "plain",
        ],
    );
    assert_eq!(code(&plain), 0, "{}", stderr(&plain));
    let one = run(
        &d,
        &[
            "infer",
            "--checkpoint",
            ck,
            "--tokens",
            "3,1,4,1,5",
            "--scale",
            "1.0",
            "--out",
            "one",
        ],
    );
    assert_eq!(code(&one), 0);
    for ext in ["spec.csv", "durations.csv"] {
        assert_eq!(
            std::fs::read(d.join(format!("plain.{ext}"))).unwrap(),
            std::fs::read(d.join(format!("one.{ext}"))).unwrap()
        );
    }
    let base = durations(&d, "plain");
    let sum: f64 = base.iter().sum();
    assert_eq!(frames_line(&plain), ((sum + 0.5).floor() as usize).max(1));

    let slow = run(
        &d,
        &[
            "infer",
            "--checkpoint",
            ck,
            "--tokens",
            "3,1,4,1,5",
            "--scale",
            "0.75",
            "--out",
            "s",
        ],
    );
    assert_eq!(code(&slow), 0);
    let scaled: f64 = durations(&d, "s").iter().sum();
    assert!((scaled - 0.75 * sum).abs() < 1e-4);
    let spec_rows = std::fs::read_to_string(d.join("s.spec.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(spec_rows, frames_line(&slow));

    let span = run(
        &d,
        &[
            "infer",
            "--checkpoint",
            ck,
            "--tokens",
            "3,1,4,1,5",
            "--span",
            "3:5:1.5",
            "--out",
            "sp",
        ],
    );
    assert_eq!(code(&span), 0, "{}", stderr(&span));
    let got = durations(&d, "sp");
    for k in 0..3 {
        assert_eq!(got[k], base[k]);
    }
    for k in 3..5 {
        assert!((got[k] - 1.5 * base[k]).abs() < 1e-5);
    }

    let bad = run(&d, &["infer", "--checkpoint", ck, "--tokens", "3,99"]);
    assert_eq!(code(&bad), 2);
    let bad = run(&d, &["infer", "--checkpoint", ck, "--tokens", "3,x"]);
    assert_eq!(code(&bad), 2);
    let bad = run(
        &d,
        &[
            "infer",
            "--checkpoint",
            ck,
            "--tokens",
            "1,2",
            "--span",
            "0:3:2",
        ],
    );
    assert_eq!(code(&bad), 2);
}

#[test]
fn infer_dumps_alignment() {
    let (_tmp, d) = trained();
    let o = run(
        &d,
        &[
            "infer",
            "--checkpoint",
            "m.ckpt",
            "--tokens",
            "2,7,9",
            "--dump-align",
            "w.txt",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let frames = frames_line(&o);
    let text = std::fs::read_to_string(d.join("w.txt")).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(|l| l.split(' ').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), frames);
    for r in &rows {
        assert_eq!(r.len(), 3);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
    let pgm = std::fs::read(d.join("w.pgm")).unwrap();
    let header = format!("P5\n{frames} 3\n255\n");
    assert!(pgm.starts_with(header.as_bytes()));
    assert_eq!(pgm.len(), header.len() + 3 * frames);
    let px = pgm[header.len()];
    assert_eq!(px, (255.0 * rows[0][0]).round() as u8);
}

#[test]
fn eval_prints_one_csv_line() {
    let (_tmp, d) = trained();
    let o = run(&d, &["eval", "--checkpoint", "m.ckpt", "--data", "c.bin"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out
        .lines()
        .filter(|l| !l.starts_with('#') && !l.contains(" = "))
        .collect();
    assert_eq!(lines.len(), 1, "{out}");
    let vals: Vec<f64> = lines[0].split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(vals.len(), 5);
    assert!(vals[0] >= 0.0);
    assert!((0.0..=1.0).contains(&vals[3]));
}

#[test]
fn checks_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["dtw-check"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let o = run(
        dir.path(),
        &["dtw-check", "--trials", "10", "--max-len", "1"],
    );
    assert_eq!(code(&o), 0);
    let o = run(dir.path(), &["dtw-check", "--corrupt-warp"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL path-enumeration oracle"));
    for seed in ["0", "7"] {
        let o = run(dir.path(), &["grad-check", "--seed", seed]);
        assert_eq!(code(&o), 0, "{}", stdout(&o));
        assert!(stdout(&o).contains("decoder.1.head.weight"));
    }
}

#[test]
fn training_is_reproducible_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(d, &["gen-data", "--out", "c.bin"])), 0);
    let mut csvs = Vec::new();
    for (out, threads) in [("a", "1"), ("b", "1"), ("c", "4")] {
        let o = run(
            d,
            &[
                "train",
                "--data",
                "c.bin",
                "--out",
                out,
                "--steps",
                "200",
                "--threads",
                threads,
            ],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        csvs.push((
            std::fs::read(d.join(format!("{out}.losses.csv"))).unwrap(),
            std::fs::read(d.join(out)).unwrap(),
        ));
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(csvs[0], csvs[2]);
}
