use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn protood(args: &[&str], extra: &[&Path]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_protood"));
    cmd.args(args);
    for p in extra {
        cmd.arg(p);
    }
    cmd.output().unwrap()
}

fn synth(dir: &Path) -> PathBuf {
    let root = dir.join("data");
    let out = protood(&["synth", "--out"], &[&root]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    root
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_owned()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_owned(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn committed_fixture_is_current() {
    let dir = tempfile::tempdir().unwrap();
    let fresh = synth(dir.path());
    let committed = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic");
    assert!(
        files(&fresh) == files(&committed),
        "regenerate with `protood synth --out fixtures/synthetic`"
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = synth(dir.path());
    let config = root.join("config.json");
    let out = dir.path().join("out");

    let ok = protood(
        &["infer", "--jobs", "2", "--config"],
        &[&config, Path::new("--out"), &out],
    );
    assert_eq!(ok.status.code(), Some(0));

    let bad = protood(
        &["eval", "--threshold", "1.5", "--config"],
        &[&config, Path::new("--out"), &out],
    );
    assert_eq!(bad.status.code(), Some(2));
    let bad = protood(
        &["infer", "--backend", "dino", "--config"],
        &[&config, Path::new("--out"), &out],
    );
    assert_eq!(bad.status.code(), Some(2));
    let bad = protood(&["infer", "--mode", "fuzzy", "--config"], &[&config]);
    assert_eq!(bad.status.code(), Some(2));

    std::fs::write(root.join("features/scene-1.pft"), b"PFT1").unwrap();
    let partial = protood(
        &["infer", "--config"],
        &[&config, Path::new("--out"), &dir.path().join("partial")],
    );
    assert_eq!(partial.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&partial.stderr);
    assert!(stderr.contains("scene-1"), "{stderr}");
    assert!(dir.path().join("partial/scene-0/ood.png").exists());
    assert!(dir.path().join("partial/scene-2/ood.png").exists());
}

#[test]
fn bank_commands_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let root = synth(dir.path());
    let config = root.join("config.json");
    let bank = dir.path().join("one.pbk");

    let built = protood(
        &["bank", "build", "--per-class-limit", "1", "--config"],
        &[&config, Path::new("--bank"), &bank],
    );
    assert!(
        built.status.success(),
        "{}",
        String::from_utf8_lossy(&built.stderr)
    );
    let inspect = protood(&["bank", "inspect", "--bank"], &[&bank]);
    let text = String::from_utf8_lossy(&inspect.stdout);
    assert!(
        text.contains("dim 8, 3 classes") && text.contains("road: 1"),
        "{text}"
    );

    let inspect = protood(&["bank", "inspect", "--config"], &[&config]);
    assert!(String::from_utf8_lossy(&inspect.stdout).contains("road: 2"));

    let out = dir.path().join("out");
    let eval = protood(
        &["eval", "--mode", "pixel", "--threshold", "0.3", "--config"],
        &[&config, Path::new("--out"), &out],
    );
    assert!(eval.status.success());
    let report: String = std::fs::read_to_string(out.join("report.json")).unwrap();
    assert!(report.contains("\"mode\": \"pixel\"") && report.contains("\"incs_threshold\": 0.3"));
}

#[test]
fn sweep_and_render() {
    let dir = tempfile::tempdir().unwrap();
    let root = synth(dir.path());
    let config = root.join("config.json");
    let out = dir.path().join("out");

    let sweep = protood(
        &[
            "sweep",
            "--axis",
            "incs",
            "--grid",
            "0.5,0.55,0.6",
            "--config",
        ],
        &[&config, Path::new("--out"), &out],
    );
    assert!(sweep.status.success());
    let csv = std::fs::read_to_string(out.join("sweep_incs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let missing = protood(
        &["render", "scene-0", "--config"],
        &[&config, Path::new("--out"), &out],
    );
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing inference output"));

    protood(&["infer", "--config"], &[&config, Path::new("--out"), &out]);
    let render = protood(
        &["render", "scene-0", "--config"],
        &[&config, Path::new("--out"), &out],
    );
    assert!(render.status.success());
    assert!(out.join("scene-0/overlay.png").exists());
}
