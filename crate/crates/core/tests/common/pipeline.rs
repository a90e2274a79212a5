//! Drives the `detkit` binary through every stage on the bundled fixture.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/pipeline")
}

pub fn detkit(args: &[&str], seed: Option<&str>) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_detkit"));
    cmd.args(args).env("RUST_LOG", "warn");
    match seed {
        Some(s) => cmd.env("DETKIT_SEED", s),
        None => cmd.env_remove("DETKIT_SEED"),
    };
    cmd.output().expect("detkit runs")
}

fn ok(args: &[&str], seed: Option<&str>) -> Vec<u8> {
    let out = detkit(args, seed);
    assert!(
        out.status.success(),
        "detkit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

/// Runs augment, mask, tta-merge, fuse, eval and select into `work` and
/// returns every produced file (plus captured stdout) keyed by name.
pub fn run_full_pipeline(work: &Path, threads: usize, seed: &str) -> BTreeMap<String, Vec<u8>> {
    let fx = fixture_dir();
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let ann = s(&fx.join("annotations.json"));
    let views = s(&fx.join("views.json"));
    let t = threads.to_string();
    let w = |name: &str| s(&work.join(name));
    let mut stdout = Vec::new();

    stdout.extend(ok(
        &[
            "--threads",
            &t,
            "augment",
            "--annotations",
            &ann,
            "--images",
            &s(&fx.join("images")),
            "--out",
            &w("aug"),
            "--n",
            "6",
            "--size",
            "96",
        ],
        Some(seed),
    ));
    stdout.extend(ok(
        &[
            "--threads",
            &t,
            "mask",
            "--image",
            &s(&fx.join("images/rack.png")),
            "--patch",
            "16",
            "--scales",
            "3",
            "--out",
            &w("mask.json"),
            "--viz",
            &w("mask.png"),
        ],
        Some(seed),
    ));
    for model in ["a", "b"] {
        let views_in: Vec<String> = (0..3)
            .map(|v| s(&fx.join(format!("model_{model}_view{v}.json"))))
            .collect();
        let out = w(&format!("tta_{model}.json"));
        let mut args = vec![
            "--threads",
            &t,
            "tta-merge",
            "--views",
            &views,
            "--annotations",
            &ann,
            "--out",
            &out,
            "--results",
        ];
        args.extend(views_in.iter().map(String::as_str));
        stdout.extend(ok(&args, Some(seed)));
    }
    let (ta, tb, fused) = (w("tta_a.json"), w("tta_b.json"), w("fused.json"));
    stdout.extend(ok(
        &[
            "--threads",
            &t,
            "fuse",
            "--annotations",
            &ann,
            "--results",
            &ta,
            &tb,
            "--weights",
            "2,1",
            "--out",
            &fused,
        ],
        Some(seed),
    ));
    std::fs::create_dir_all(work.join("reports")).unwrap();
    for (id, file) in [("1", &ta), ("2", &tb), ("3", &fused)] {
        let out = w(&format!("reports/model_{id}.json"));
        stdout.extend(ok(
            &[
                "--threads",
                &t,
                "eval",
                "--results",
                file,
                "--annotations",
                &ann,
                "--model-id",
                id,
                "--out",
                &out,
            ],
            Some(seed),
        ));
    }
    stdout.extend(ok(
        &[
            "--threads",
            &t,
            "select",
            "--reports",
            &w("reports"),
            "--k",
            "2",
            "--out",
            &w("selected.txt"),
        ],
        Some(seed),
    ));

    let mut files = BTreeMap::new();
    for entry in walk(work) {
        let rel = entry
            .strip_prefix(work)
            .unwrap()
            .to_string_lossy()
            .into_owned();
        files.insert(rel, std::fs::read(&entry).unwrap());
    }
    files.insert("<stdout>".into(), stdout);
    files
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}
