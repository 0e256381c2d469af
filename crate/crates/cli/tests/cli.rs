use std::path::Path;
use std::process::{Command, Output};

fn invnorm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_invnorm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn roundtrip_passes_and_fails_on_zero_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let ok = invnorm(dir.path(), &["roundtrip", "--trials", "3"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    assert_eq!(stdout(&ok).matches("pass").count(), 3);

    let bad = invnorm(dir.path(), &["roundtrip", "--trials", "2", "--tol", "0"]);
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("worst shape"));
}

#[test]
fn gradcheck_and_logdet_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = invnorm(
        dir.path(),
        &["gradcheck", "--layers", "actnorm,instance-norm"],
    );
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    let strict = invnorm(
        dir.path(),
        &["gradcheck", "--layers", "actnorm", "--rel-tol", "0"],
    );
    assert_eq!(code(&strict), 1);
    assert!(String::from_utf8_lossy(&strict.stderr).contains("actnorm"));

    let ld = invnorm(dir.path(), &["logdet-check"]);
    assert_eq!(code(&ld), 0);
    assert!(stdout(&ld).contains("coupling"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&invnorm(dir.path(), &["roundtrip", "--nope"])), 2);
    assert_eq!(
        code(&invnorm(dir.path(), &["gradcheck", "--layers", "resnet"])),
        2
    );
    assert_eq!(
        code(&invnorm(
            dir.path(),
            &["train", "--data", "missing", "--held-out", "dim"]
        )),
        2
    );
    assert_eq!(code(&invnorm(dir.path(), &["gen-data", "--hw", "8"])), 2);
    assert_eq!(code(&invnorm(dir.path(), &["--jobs", "0", "roundtrip"])), 2);
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.toml"),
        "trials = 2\ntol = 0.0\nshapes = [\"1x3x8x8\"]\n",
    )
    .unwrap();
    let from_file = invnorm(dir.path(), &["--config", "c.toml", "roundtrip"]);
    assert_eq!(code(&from_file), 1);
    assert!(stdout(&from_file).contains("1x3x8x8"));
    let overridden = invnorm(
        dir.path(),
        &["roundtrip", "--config", "c.toml", "--tol", "1e-4"],
    );
    assert_eq!(
        code(&overridden),
        0,
        "{}",
        String::from_utf8_lossy(&overridden.stderr)
    );

    std::fs::write(dir.path().join("bad.toml"), "colour = 3\n").unwrap();
    let bad = invnorm(dir.path(), &["--config", "bad.toml", "roundtrip"]);
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("colour"));
}

#[test]
fn data_train_eval_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let gen = invnorm(
        p,
        &[
            "--output-dir",
            "data",
            "gen-data",
            "--n-per-domain",
            "20",
            "--classes",
            "2",
            "--hw",
            "16",
        ],
    );
    assert_eq!(code(&gen), 0, "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(p.join("data/manifest.csv").is_file());

    let unknown = invnorm(
        p,
        &[
            "train",
            "--data",
            "data",
            "--held-out",
            "sepia",
            "--epochs",
            "1",
        ],
    );
    assert_eq!(code(&unknown), 2);

    let common = ["--data", "data", "--held-out", "dim"];
    let train_args: Vec<&str> = ["--output-dir", "models", "train"]
        .into_iter()
        .chain(common)
        .chain([
            "--epochs",
            "1",
            "--batch-size",
            "20",
            "--steps-per-block",
            "1",
            "--hidden",
            "4",
        ])
        .collect();
    let train = invnorm(p, &train_args);
    assert_eq!(
        code(&train),
        0,
        "{}",
        String::from_utf8_lossy(&train.stderr)
    );
    for f in ["baseline.cnn", "invnorm.flow", "invnorm.cnn"] {
        assert!(p.join("models").join(f).is_file(), "{f}");
    }

    let eval_args: Vec<&str> = ["--output-dir", "reports", "eval", "--models", "models"]
        .into_iter()
        .chain(common)
        .collect();
    let eval = invnorm(p, &eval_args);
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    let first = std::fs::read(p.join("reports/report_invnorm_dim_s0.json")).unwrap();
    // evaluation is deterministic
    assert_eq!(code(&invnorm(p, &eval_args)), 0);
    assert_eq!(
        std::fs::read(p.join("reports/report_invnorm_dim_s0.json")).unwrap(),
        first
    );

    let report = invnorm(
        p,
        &[
            "--output-dir",
            "summary",
            "report",
            "--svg",
            "reports/report_baseline_dim_s0.json",
            "reports/report_invnorm_dim_s0.json",
        ],
    );
    assert_eq!(
        code(&report),
        0,
        "{}",
        String::from_utf8_lossy(&report.stderr)
    );
    assert!(stdout(&report).contains("invnorm"));
    let csv = std::fs::read_to_string(p.join("summary/comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(std::fs::read_to_string(p.join("summary/accuracy.svg"))
        .unwrap()
        .starts_with("<svg"));

    let missing = invnorm(
        p,
        &[
            "eval",
            "--data",
            "data",
            "--models",
            "nowhere",
            "--held-out",
            "dim",
        ],
    );
    assert_eq!(code(&missing), 2);
    let not_report = invnorm(p, &["report", "data/manifest.csv"]);
    assert_eq!(code(&not_report), 2);
}
