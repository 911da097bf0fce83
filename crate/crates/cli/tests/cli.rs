use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn idf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idf"))
        .args(args)
        .env_remove("IDF_SEED")
        .env_remove("IDF_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// The tiny IDF++ preset cut down to one short epoch.
fn quick_tiny_config(dir: &Path) -> PathBuf {
    let text = std::fs::read_to_string(configs().join("tiny_idfpp.toml")).unwrap();
    let text = replace_line(&text, "epochs", "epochs = 1");
    let text = replace_line(&text, "train_images", "train_images = 40");
    let path = dir.join("quick.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn replace_line(text: &str, key: &str, with: &str) -> String {
    let mut hit = false;
    let out: Vec<String> = text
        .lines()
        .map(|l| {
            if l.split('=').next().map(str::trim) == Some(key) {
                hit = true;
                with.to_string()
            } else {
                l.to_string()
            }
        })
        .collect();
    assert!(hit, "no `{key}` line");
    out.join("\n") + "\n"
}

fn data_rows(path: &Path) -> usize {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().filter(|l| !l.starts_with('#')).count() - 1
}

#[test]
fn missing_config_field_is_named_with_exit_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("tiny_idfpp.toml")).unwrap();
    let text: String = text
        .lines()
        .filter(|l| !l.trim_start().starts_with("batch_size"))
        .map(|l| format!("{l}\n"))
        .collect();
    let path = dir.path().join("broken.toml");
    std::fs::write(&path, text).unwrap();
    let o = idf(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = idf(&["flatten-demo", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_idf"))
        .args(["flatten-demo"])
        .env("IDF_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_compress_decompress_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = quick_tiny_config(d);
    let run = |out: &str| {
        let o = idf(&[
            "--seed",
            "3",
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            d.join(out).to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("# effective config"));
        std::fs::read(d.join(out).join("seed3/metrics.csv")).unwrap()
    };
    // Same seed and config: identical metric logs.
    assert_eq!(run("a"), run("b"));

    let model = d.join("a/seed3/model.idfm");
    let (raw, z, back) = (d.join("img.idfr"), d.join("img.idfz"), d.join("back.idfr"));
    let s = |p: &Path| p.to_str().unwrap().to_string();
    assert!(
        idf(&["--seed", "9", "synth", "--out", &s(&raw), "--count", "6"])
            .status
            .success()
    );

    let o = idf(&[
        "compress",
        "--model",
        &s(&model),
        "--in",
        &s(&raw),
        "--out",
        &s(&z),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("file_bpd"));
    let first = std::fs::read(&z).unwrap();
    assert!(idf(&[
        "compress",
        "--model",
        &s(&model),
        "--in",
        &s(&raw),
        "--out",
        &s(&z)
    ])
    .status
    .success());
    assert_eq!(
        std::fs::read(&z).unwrap(),
        first,
        "stream is not deterministic"
    );

    let o = idf(&[
        "decompress",
        "--model",
        &s(&model),
        "--in",
        &s(&z),
        "--out",
        &s(&back),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&raw).unwrap(), std::fs::read(&back).unwrap());

    let o = idf(&["eval", "--model", &s(&model), "--in", &s(&raw)]);
    assert!(o.status.success() && stdout(&o).contains("nll_bpd"));

    // Damaged stream and mismatched model both exit with 3.
    let cut = d.join("cut.idfz");
    std::fs::write(&cut, &first[..first.len() / 2]).unwrap();
    let o = idf(&[
        "decompress",
        "--model",
        &s(&model),
        "--in",
        &s(&cut),
        "--out",
        &s(&back),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let text = std::fs::read_to_string(&cfg).unwrap();
    std::fs::write(
        &cfg,
        replace_line(&text, "hidden_channels", "hidden_channels = 12"),
    )
    .unwrap();
    assert!(idf(&[
        "--seed",
        "4",
        "train",
        "--config",
        &s(&cfg),
        "--out",
        &s(&d.join("c"))
    ])
    .status
    .success());
    let o = idf(&[
        "decompress",
        "--model",
        &s(&d.join("c/seed4/model.idfm")),
        "--in",
        &s(&z),
        "--out",
        &s(&back),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn flatten_demo_reports_a_rank_one_image() {
    let o = idf(&["flatten-demo", "--counts", "2,2", "--pmf", "toy"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("bijection verified on 4 points"), "{out}");
    assert!(out.contains("rank one: true"), "{out}");
    for row in ["0.1000", "0.2000", "0.3000", "0.4000"] {
        assert!(out.contains(row), "{out}");
    }
    let o = idf(&["flatten-demo", "--counts", "3,2,2", "--pmf", "random"]);
    assert!(o.status.success() && stdout(&o).contains("bijection verified on 12 points"));
}

#[test]
fn gradient_sweep_has_one_row_per_epsilon_and_batch_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = |name: &str| {
        let out = dir.path().join(name);
        let o = idf(&[
            "analyze",
            "gradients",
            "--out",
            out.to_str().unwrap(),
            "--bits",
            "1",
            "--iterations",
            "20",
            "--batches",
            "3",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        out.join("agreement.csv")
    };
    let (a, b) = (sweep("a"), sweep("b"));
    assert_eq!(data_rows(&a), 8 * 3);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let header = std::fs::read_to_string(&a).unwrap();
    assert!(header.lines().any(|l| l == "epsilon,batch_id,cosine"));
}

#[test]
fn landscape_grid_has_resolution_squared_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("land");
    let o = idf(&[
        "analyze",
        "landscape",
        "--out",
        out.to_str().unwrap(),
        "--bits",
        "1",
        "--iterations",
        "40",
        "--resolution",
        "51",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(data_rows(&out.join("landscape.csv")), 2601);
    assert!(data_rows(&out.join("trajectory.csv")) >= 2);
}

#[test]
fn estimator_matrix_writes_one_row_per_combination_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("est");
    let o = idf(&[
        "analyze",
        "estimators",
        "--out",
        out.to_str().unwrap(),
        "--bits",
        "1",
        "--iterations",
        "10",
        "--seeds",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let path = out.join("estimators.csv");
    assert_eq!(data_rows(&path), 7 * 2);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next(), Some("forward,backward,mode,seed,bpd"));
}
