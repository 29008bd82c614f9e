//! End-to-end checks of the installed binary: exit codes, determinism,
//! and output schemas.

use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn nowcast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nowcast"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn sha(path: &Path) -> String {
    format!("{:x}", Sha256::digest(std::fs::read(path).unwrap()))
}

const TINY_CFG: &str = "\
model.context_frames=3
model.horizon=4
model.channels=8
model.embed_dim=4
model.reduc_factor=4
model.dropout=0
model.evolver_depth=2
model.evolver_dim=8
model.lead_time_classes=6
training.steps=12
training.batch_size=4
training.lr=0.002
training.seed=11
flow.context_frames=3
";

/// Synthesize a small training corpus plus a config file.
fn setup_corpus(dir: &Path) {
    std::fs::create_dir(dir.join("data")).unwrap();
    for seed in 0..4 {
        let out = nowcast(
            dir,
            &[
                "synthesize",
                "--out",
                &format!("data/w{seed}.tpnn"),
                "--n",
                "32",
                "--frames",
                "8",
                "--seed",
                &seed.to_string(),
            ],
        );
        assert_exit(&out, 0);
    }
    std::fs::write(dir.join("cfg.txt"), TINY_CFG).unwrap();
}

#[test]
fn synthesize_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.tpnn", "b.tpnn"] {
        let out = nowcast(
            dir.path(),
            &["synthesize", "--out", name, "--n", "32", "--frames", "6", "--seed", "9"],
        );
        assert_exit(&out, 0);
    }
    assert_eq!(sha(&dir.path().join("a.tpnn")), sha(&dir.path().join("b.tpnn")));
}

#[test]
fn extract_zero_sequence_gives_empty_csv_with_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = nowcast(
        dir.path(),
        &[
            "synthesize", "--out", "dry.tpnn", "--n", "32", "--frames", "6",
            "--amplitude", "0.0001,0.0002", "--seed", "1",
        ],
    );
    assert_exit(&out, 0);
    let out = nowcast(
        dir.path(),
        &["extract", "--input", "dry.tpnn", "--tau", "1", "--out", "events.csv"],
    );
    assert_exit(&out, 0);
    let csv = std::fs::read_to_string(dir.path().join("events.csv")).unwrap();
    assert_eq!(csv, "event_id,start_unix,end_unix,peak_accum,split\n");
}

#[test]
fn extract_bad_magic_exits_2_with_offset_message() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.tpnn"), b"JUNKJUNKJUNK").unwrap();
    let out = nowcast(
        dir.path(),
        &["extract", "--input", "bad.tpnn", "--tau", "1", "--out", "x.csv"],
    );
    assert_exit(&out, 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("byte 0"), "{err}");
}

#[test]
fn unknown_config_key_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    setup_corpus(dir.path());
    std::fs::write(dir.path().join("cfg.txt"), "model.chanels=8\n").unwrap();
    let out = nowcast(
        dir.path(),
        &[
            "train", "--stage", "ved", "--data", "data", "--weights", "w.tpnw",
            "--config", "cfg.txt",
        ],
    );
    assert_exit(&out, 3);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.chanels"), "{err}");
}

#[test]
fn evolver_before_ved_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    setup_corpus(dir.path());
    let out = nowcast(
        dir.path(),
        &[
            "train", "--stage", "evolver", "--data", "data", "--weights", "w.tpnw",
            "--config", "cfg.txt",
        ],
    );
    assert_exit(&out, 3);
}

#[test]
fn missing_data_dir_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.txt"), TINY_CFG).unwrap();
    let out = nowcast(
        dir.path(),
        &[
            "train", "--stage", "ved", "--data", "nope", "--weights", "w.tpnw",
            "--config", "cfg.txt",
        ],
    );
    assert_exit(&out, 2);
}

#[test]
fn training_reruns_reproduce_weight_hashes_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    setup_corpus(dir.path());
    let mut hashes = Vec::new();
    for run in 0..2 {
        let w = format!("w{run}.tpnw");
        for stage in ["ved", "evolver"] {
            let out = nowcast(
                dir.path(),
                &[
                    "train", "--stage", stage, "--data", "data", "--weights", &w,
                    "--config", "cfg.txt", "--log", &format!("{w}.{stage}.csv"),
                ],
            );
            assert_exit(&out, 0);
        }
        hashes.push((
            sha(&dir.path().join(&w)),
            sha(&dir.path().join(format!("{w}.ved.csv"))),
            sha(&dir.path().join(format!("{w}.evolver.csv"))),
        ));
    }
    assert_eq!(hashes[0], hashes[1]);
    let curve = std::fs::read_to_string(dir.path().join("w0.tpnw.ved.csv")).unwrap();
    assert!(curve.starts_with("step,stage,total,intensity,motion,cosine,kl\n"));
}

#[test]
fn nowcast_pipeline_runs_and_flags_context_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    setup_corpus(dir.path());
    for stage in ["ved", "evolver"] {
        let out = nowcast(
            dir.path(),
            &[
                "train", "--stage", stage, "--data", "data", "--weights", "w.tpnw",
                "--config", "cfg.txt",
            ],
        );
        assert_exit(&out, 0);
    }
    // an 8-frame window is not a 3-frame context
    let out = nowcast(
        dir.path(),
        &["nowcast", "--weights", "w.tpnw", "--input", "data/w0.tpnn", "--out", "p.tpnn"],
    );
    assert_exit(&out, 3);

    // cut a valid context by re-synthesizing 3 frames with the same seed
    let out = nowcast(
        dir.path(),
        &["synthesize", "--out", "ctx.tpnn", "--n", "32", "--frames", "3", "--seed", "0"],
    );
    assert_exit(&out, 0);
    let out = nowcast(
        dir.path(),
        &[
            "nowcast", "--weights", "w.tpnw", "--input", "ctx.tpnn", "--out", "p.tpnn",
            "--fields", "f.tpnn",
        ],
    );
    assert_exit(&out, 0);
    // horizon frames out, three field channels per lead
    let (_, ts, frames, n) = nowcast_tools::tpnn::read_raw(&dir.path().join("p.tpnn")).unwrap();
    assert_eq!((frames.len(), n), (4, 32));
    assert!(ts.windows(2).all(|w| w[1] - w[0] == 600));
    let (_, fts, ffields, _) = nowcast_tools::tpnn::read_raw(&dir.path().join("f.tpnn")).unwrap();
    assert_eq!(ffields.len(), 12);
    assert_eq!(fts[0], ts[0]);
    assert_eq!(fts[2], ts[0]);
}

#[test]
fn evaluate_perfect_forecast_and_misalignment() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("pred")).unwrap();
    std::fs::create_dir(dir.path().join("truth")).unwrap();
    for seed in 0..3 {
        for sub in ["pred", "truth"] {
            let out = nowcast(
                dir.path(),
                &[
                    "synthesize", "--out", &format!("{sub}/e{seed}.tpnn"), "--n", "32",
                    "--frames", "4", "--seed", &seed.to_string(),
                ],
            );
            assert_exit(&out, 0);
        }
    }
    let out = Command::new(env!("CARGO_BIN_EXE_nowcast"))
        .current_dir(dir.path())
        .env("NOWCAST_THREADS", "2")
        .args(["evaluate", "--pred", "pred", "--truth", "truth", "--out", "skill.csv"])
        .output()
        .unwrap();
    assert_exit(&out, 0);
    let table = std::fs::read_to_string(dir.path().join("skill.csv")).unwrap();
    assert!(table.starts_with("lead_min,threshold,pool,tp,tn,fp,fn,csi,hss\n"));
    // pred equals truth, so every cell with any event scores 1
    for line in table.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 9);
        let (fp, fn_): (u64, u64) = (cols[5].parse().unwrap(), cols[6].parse().unwrap());
        assert_eq!((fp, fn_), (0, 0), "{line}");
        if cols[3] != "0" {
            assert_eq!(cols[7], "1.000000", "{line}");
        }
    }
    assert!(dir.path().join("skill_summary.csv").exists());

    // a prediction without an observation names the offender
    std::fs::remove_file(dir.path().join("truth/e1.tpnn")).unwrap();
    let out = nowcast(
        dir.path(),
        &["evaluate", "--pred", "pred", "--truth", "truth", "--out", "skill.csv"],
    );
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("e1.tpnn"));
}

#[test]
fn gradcheck_passes_and_corruption_names_warp() {
    let dir = tempfile::tempdir().unwrap();
    let out = nowcast(dir.path(), &["gradcheck", "--seed", "1", "--instances", "3"]);
    assert_exit(&out, 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().all(|l| l.contains("status=pass")), "{text}");

    let out = nowcast(
        dir.path(),
        &["gradcheck", "--seed", "1", "--instances", "3", "--corrupt-warp"],
    );
    assert_exit(&out, 1);
    let text = String::from_utf8_lossy(&out.stdout);
    let failing: Vec<&str> = text.lines().filter(|l| l.contains("status=fail")).collect();
    assert_eq!(failing.len(), 1);
    assert!(failing[0].contains("warp"), "{failing:?}");
}
