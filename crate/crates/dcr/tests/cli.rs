use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dcr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    fs::write(
        &path,
        "data.samples = 150\nseeds = 5\nafd.epochs = 1\nada.epochs = 1\ngeneral.epochs = 1\nfusion_baseline = false\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn stages_run_end_to_end_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data.bin").to_string_lossy().into_owned();
    let out = dir.path().join("out").to_string_lossy().into_owned();

    let g = dcr(&["generate", "--config", &cfg, "--out", &data]);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    assert!(String::from_utf8_lossy(&g.stdout).starts_with("split,samples\n"));

    let common = ["--config", &cfg, "--dataset", &data, "--out", &out];
    let a = dcr(&[&["train-afd"][..], &common].concat());
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let afd = format!("{out}/afd_seed5.ckpt");
    let b = dcr(&[&["train-ada", "--afd", &afd][..], &common].concat());
    assert!(b.status.success(), "{}", String::from_utf8_lossy(&b.stderr));
    let ada = format!("{out}/ada_seed5.ckpt");

    let e = dcr(&[&["eval", "--afd", &afd, "--ada", &ada][..], &common].concat());
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    for f in [
        "metrics.csv",
        "conflict_subsets.csv",
        "actions.csv",
        "topk_confidence.csv",
    ] {
        let text = fs::read_to_string(Path::new(&out).join(f)).unwrap();
        assert!(text.lines().count() > 1, "{f}");
    }

    let r = dcr(&[&["run"][..], &common].concat());
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).starts_with("seed,method,accuracy"));
    assert!(Path::new(&out).join("aggregate.csv").exists());
    assert!(Path::new(&out).join("summary.json").exists());

    let s = dcr(&[&["eval", "--afd", &ada][..], &common].concat());
    assert_eq!(s.status.code(), Some(3), "stage mismatch");

    let mut bytes = fs::read(&afd).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, bytes).unwrap();
    let i = dcr(&[&["eval", "--afd", bad.to_str().unwrap()][..], &common].concat());
    assert_eq!(i.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&i.stderr).contains("hash mismatch"));
}

#[test]
fn argument_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert_eq!(
        dcr(&["ablate", "--config", &cfg, "--variants", "full,bogus"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(dcr(&["frobnicate"]).status.code(), Some(2));
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "unknown.key = 1\n").unwrap();
    let o = dcr(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
}

#[test]
fn ablate_prints_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = dcr(&["ablate", "--config", &cfg, "--variants", "full"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("full,"));
}
