use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_idgen"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// The single error line of a failed command.
fn failure(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {err:?}");
    assert!(lines[0].starts_with("error: "), "{err}");
    lines[0].to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = "\
[data]
toy_per_class = 40
[diffusion]
epochs = 2
batch_size = 16
checkpoint_every = 1
generate_batch = 8
steps = 4
[backbone]
model_channels = 8
channel_multipliers = 1,2
[classifier]
max_epochs = 4
patience = 2
[evaluation]
tsne_points = 20
perplexity = 5.0
tsne_iterations = 50
";

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("tiny.ini");
    std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

#[test]
fn roundtrip_check_passes_and_detects_corruption() {
    let dir = scratch("roundtrip");
    let out = dir.join("audit.txt");
    let r = ok(&["roundtrip-check", "--count", "200", "--out", s(&out)]);
    assert!(String::from_utf8_lossy(&r.stdout).starts_with("PASS 200 windows"));
    assert!(dir.join("audit.txt.manifest").exists());

    // single-column edge case
    let r = ok(&["roundtrip-check", "--length", "64", "--height", "64", "--count", "20", "--out", s(&out)]);
    assert!(String::from_utf8_lossy(&r.stdout).contains("1 columns"));

    let r = run(&["roundtrip-check", "--count", "5", "--corrupt", "70", "--out", s(&out)]);
    assert!(!r.status.success());
    let text = String::from_utf8_lossy(&r.stdout);
    assert!(text.starts_with("FAIL window 0 channel 0:") && text.contains("index"), "{text}");
}

#[test]
fn errors_are_single_lines_naming_the_cause() {
    let dir = scratch("errors");
    let missing = dir.join("nope.csv");
    let line = failure(&["ingest", "--data-root", s(&dir), "--manifest", s(&missing), "--out", s(&dir.join("d"))]);
    assert!(line.contains("nope.csv"), "{line}");

    let bad = dir.join("bad.ini");
    std::fs::write(&bad, "[diffusion]\nepoch = 3\n").unwrap();
    let line = failure(&["ingest", "--toy", "--config", s(&bad), "--out", s(&dir.join("d"))]);
    assert!(line.starts_with("error: config:") && line.contains("epoch"), "{line}");
}

#[test]
fn ingest_recordings_from_manifest() {
    let dir = scratch("ingest");
    let mut manifest = String::from("file,label,subject\n");
    for (i, label) in ["bag", "body", "handheld", "leg"].iter().cycle().take(24).enumerate() {
        let mut rec = String::from("t,ax,ay,az\n");
        for t in 0..400 {
            let x = (t as f64 * (0.05 + 0.01 * i as f64)).sin();
            rec.push_str(&format!("{:.3},{x},{},{}\n", t as f64 / 200.0, 0.5 * x, 9.8 + 0.1 * x));
        }
        std::fs::write(dir.join(format!("r{i}.csv")), rec).unwrap();
        manifest.push_str(&format!("r{i}.csv,{label},s{}\n", i % 3));
    }
    std::fs::write(dir.join("manifest.csv"), manifest).unwrap();
    let cfg = dir.join("ingest.ini");
    std::fs::write(&cfg, "[data]\nwindow = 256\ndrop = 50\n[embedding]\nlength = 256\nskip = 7\nheight = 32\n").unwrap();
    let out = dir.join("ds.idgc");
    let args = ["ingest", "--data-root", s(&dir), "--manifest", "manifest.csv", "--config", s(&cfg), "--out", s(&out)];
    ok(&args);
    let first = std::fs::read(&out).unwrap();
    let stats = std::fs::read_to_string(dir.join("stats.csv")).unwrap();
    assert!(stats.starts_with("channel,mean,std,split,count\n"));
    ok(&args);
    assert_eq!(std::fs::read(&out).unwrap(), first, "re-ingest changed the container");
    let manifest = std::fs::read_to_string(dir.join("ds.idgc.manifest")).unwrap();
    assert!(manifest.contains("input.manifest") && manifest.contains("[embedding]"));

    let r = ok(&["roundtrip-check", "--dataset", s(&out), "--skip", "7", "--height", "32", "--out", s(&dir.join("rt.txt"))]);
    assert!(String::from_utf8_lossy(&r.stdout).starts_with("PASS"));
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = scratch("pipeline");
    let cfg = tiny_config(&dir, "");
    let c = |args: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = args.iter().map(|a| a.to_string()).collect();
        v.extend(["--preset".into(), "desk".into(), "--config".into(), s(&cfg).into()]);
        v
    };
    let call = |args: Vec<String>| ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();

    call(c(&["ingest", "--toy", "--out", &p("ds.idgc")]));
    assert!(dir.join("stats.csv").exists());

    call(c(&["train-diffusion", "--dataset", &p("ds.idgc"), "--out", &p("dm.idgc")]));
    let loss = std::fs::read_to_string(dir.join("dm.idgc.loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3, "{loss}");
    call(c(&["train-diffusion", "--dataset", &p("ds.idgc"), "--out", &p("dm2.idgc")]));
    assert_eq!(std::fs::read(dir.join("dm.idgc")).unwrap(), std::fs::read(dir.join("dm2.idgc")).unwrap());

    // resume to three epochs continues the step counter
    let cfg3 = dir.join("three.ini");
    std::fs::write(&cfg3, TINY.replace("epochs = 2", "epochs = 3")).unwrap();
    ok(&[
        "train-diffusion", "--dataset", &p("ds.idgc"), "--out", &p("dm3.idgc"), "--resume", &p("dm.idgc"),
        "--preset", "desk", "--config", s(&cfg3),
    ]);
    let m2 = std::fs::read_to_string(dir.join("dm.idgc.manifest")).unwrap();
    let m3 = std::fs::read_to_string(dir.join("dm3.idgc.manifest")).unwrap();
    let steps = |m: &str| -> u64 {
        m.lines().find_map(|l| l.strip_prefix("steps = ")).unwrap().parse().unwrap()
    };
    assert_eq!(steps(&m3), steps(&m2) / 2 * 3);
    assert!(m3.contains("epochs = 3"));

    call(c(&["generate", "--model", &p("dm.idgc"), "--label", "all", "--count", "8", "--out", &p("syn.idgc"), "--csv", &p("syn.csv")]));
    let csv = std::fs::read_to_string(dir.join("syn.csv")).unwrap();
    for label in ["bag", "body", "handheld", "leg"] {
        let windows: std::collections::BTreeSet<&str> = csv
            .lines()
            .skip(1)
            .filter(|l| l.split(',').nth(1) == Some(label))
            .map(|l| l.split(',').next().unwrap())
            .collect();
        assert_eq!(windows.len(), 2, "{label}");
    }
    call(c(&["generate", "--model", &p("dm.idgc"), "--label", "handheld", "--count", "3", "--out", &p("hh.idgc"), "--csv", &p("hh.csv")]));
    let csv = std::fs::read_to_string(dir.join("hh.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("handheld")));
    assert_eq!(csv.lines().count(), 1 + 3 * 256);
    let args = c(&["generate", "--model", &p("dm.idgc"), "--label", "pocket", "--count", "3", "--out", &p("x.idgc")]);
    let line = failure(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(line.contains("pocket") && line.contains("bag, body, handheld, leg"), "{line}");

    call(c(&["train-classifier", "--dataset", &p("ds.idgc"), "--variant", "image", "--out", &p("img.idgc")]));
    call(c(&["train-classifier", "--dataset", &p("ds.idgc"), "--variant", "signal", "--out", &p("sig.idgc")]));
    assert!(dir.join("img.idgc.history.csv").exists());

    call(c(&[
        "evaluate", "--real", &p("ds.idgc"), "--synthetic", &p("syn.idgc"), "--image-model", &p("img.idgc"),
        "--signal-model", &p("sig.idgc"), "--out", &p("report"),
    ]));
    for f in [
        "summary.txt",
        "accuracy.csv",
        "fid.csv",
        "pdf_x.csv",
        "pdf_y.csv",
        "pdf_z.csv",
        "tsne.csv",
        "confusion_image_real.csv",
        "confusion_signal_synthetic.csv",
        "manifest.txt",
    ] {
        assert!(dir.join("report").join(f).exists(), "missing {f}");
    }
    let summary = std::fs::read_to_string(dir.join("report/summary.txt")).unwrap();
    assert!(summary.contains("Real Test Data") && summary.contains("Synthetic Data"));

    // real test split evaluated against itself: no gap
    call(c(&[
        "evaluate", "--real", &p("ds.idgc"), "--synthetic", &p("ds.idgc"), "--image-model", &p("img.idgc"),
        "--signal-model", &p("sig.idgc"), "--out", &p("self"),
    ]));
    let acc = std::fs::read_to_string(dir.join("self/accuracy.csv")).unwrap();
    for row in acc.lines().skip(1) {
        assert!(row.ends_with(",0.0000"), "{row}");
    }

    let args = c(&[
        "evaluate", "--real", &p("ds.idgc"), "--synthetic", &p("syn.idgc"), "--image-model", &p("missing.idgc"),
        "--signal-model", &p("sig.idgc"), "--out", &p("r2"),
    ]);
    let line = failure(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(line.starts_with("error: io:") && line.contains("missing.idgc"), "{line}");
}
