use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn cracsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cracsim"))
        .args(args)
        .env_remove("CRACSIM_SEED")
        .output()
        .expect("run cracsim")
}

fn digest(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("digest: "))
        .unwrap_or_else(|| panic!("no digest in {stdout:?}"))
        .to_string()
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

const SMALL: &[&str] = &[
    "--workload",
    "stream_overlap",
    "--streams",
    "8",
    "--iters",
    "30",
    "--data-bytes",
    "4096",
];

fn with<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(SMALL).chain(tail).copied().collect()
}

#[test]
fn pinned_stream_overlap_digest() {
    let out = cracsim(&[
        "run",
        "--workload",
        "stream_overlap",
        "--streams",
        "128",
        "--iters",
        "1000",
        "--seed",
        "7",
    ]);
    assert_eq!(digest(&out), PINNED_128_1000_7);
}

const PINNED_128_1000_7: &str = "0x1d5d479b7f5d3cf8";

#[test]
fn digest_is_the_same_in_every_mode() {
    let native = digest(&cracsim(&with(&["run"], &["--mode", "native"])));
    assert_eq!(digest(&cracsim(&with(&["run"], &["--mode", "direct"]))), native);
    assert_eq!(digest(&cracsim(&with(&["run"], &["--mode", "proxy"]))), native);
}

#[test]
fn seed_flag_beats_env() {
    let run = |env: Option<&str>, flag: Option<&str>| {
        let mut args = with(&["run"], &[]);
        if let Some(f) = flag {
            args.extend(["--seed", f]);
        }
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_cracsim"));
        cmd.args(&args).env_remove("CRACSIM_SEED");
        if let Some(e) = env {
            cmd.env("CRACSIM_SEED", e);
        }
        digest(&cmd.output().unwrap())
    };
    let from_env = run(Some("99"), None);
    assert_eq!(from_env, run(None, Some("99")));
    assert_eq!(run(Some("5"), Some("99")), from_env);
    assert_ne!(run(None, None), from_env);
}

#[test]
fn immediate_checkpoint_then_restart() {
    let dir = TempDir::new().unwrap();
    let image = path(&dir, "img");
    let full = digest(&cracsim(&with(&["run"], &["--image", &image, "--ckpt-after", "0"])));
    assert_eq!(digest(&cracsim(&with(&["run"], &[]))), full);
    assert_eq!(digest(&cracsim(&["restart", "--image", &image])), full);
    assert_eq!(
        digest(&cracsim(&["restart", "--image", &image, "--mode", "proxy"])),
        full
    );
}

#[test]
fn compressed_checkpoint_on_file_trigger() {
    let dir = TempDir::new().unwrap();
    let image = path(&dir, "img.gz");
    let flag = path(&dir, "go");
    std::fs::write(&flag, b"").unwrap();
    let out = cracsim(&with(
        &["run"],
        &["--image", &image, "--ckpt-on-file", &flag, "--compress"],
    ));
    let full = digest(&out);
    let bytes = std::fs::read(&image).unwrap();
    assert_eq!(&bytes[..2], &[0x1f, 0x8b]);
    assert_eq!(digest(&cracsim(&["restart", "--image", &image])), full);
}

#[test]
fn mid_run_checkpoint_restarts_to_same_digest() {
    let dir = TempDir::new().unwrap();
    let image = path(&dir, "img");
    let args = ["--workload", "blas_gemv", "--data-mb", "4", "--iters", "400"];
    let full = digest(&cracsim(
        &[&["run"][..], &args[..], &["--image", &image, "--ckpt-after", "0.05"]].concat(),
    ));
    assert!(Path::new(&image).exists(), "trigger did not fire");
    let restarted = cracsim(&["restart", "--image", &image]);
    assert_eq!(digest(&restarted), full);
}

#[test]
fn usage_errors_exit_2() {
    let out = cracsim(&with(&["run"], &["--ckpt-after", "1"]));
    assert_eq!(out.status.code(), Some(2));
    let out = cracsim(&["bench", "--workload", "uvm_tasks"]);
    assert_eq!(out.status.code(), Some(2));
    let out = cracsim(&["run", "--workload", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_images_exit_3() {
    let dir = TempDir::new().unwrap();
    let image = path(&dir, "img");
    digest(&cracsim(&with(&["run"], &["--image", &image, "--ckpt-after", "0"])));
    let mut bytes = std::fs::read(&image).unwrap();

    let truncated = path(&dir, "short");
    std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(cracsim(&["restart", "--image", &truncated]).status.code(), Some(3));

    let flipped = path(&dir, "flipped");
    let mid = bytes.len() / 3;
    bytes[mid] ^= 0x10;
    std::fs::write(&flipped, &bytes).unwrap();
    assert_eq!(cracsim(&["inspect", "--image", &flipped]).status.code(), Some(3));
    assert_eq!(cracsim(&["restart", "--image", &flipped]).status.code(), Some(3));
}

#[test]
fn inspect_reports_sections_and_payload() {
    let dir = TempDir::new().unwrap();
    let image = path(&dir, "img");
    digest(&cracsim(&with(&["run"], &["--image", &image, "--ckpt-after", "0"])));
    let out = cracsim(&["inspect", "--image", &image, "--dump-log"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for name in [
        "META",
        "LOG",
        "ALLOC_PAYLOADS",
        "UVM_PAGES",
        "STREAMS",
        "APPSTATE",
        "KERNEL_REGISTRY",
    ] {
        assert!(text.contains(name), "{name} missing from:\n{text}");
    }
    // checkpoint before the first step: nothing allocated yet
    assert!(text.contains("active allocations: 0"), "{text}");
    assert!(text.contains("payload bytes: 0"), "{text}");
}

#[test]
fn bench_emits_recomputable_json() {
    let out = cracsim(&[
        "bench",
        "--workload",
        "blas_dot",
        "--data-bytes",
        "65536",
        "--iters",
        "20",
        "--repeats",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let e = v["e_seconds"]["mean"].as_f64().unwrap();
    let n = v["e_native_seconds"]["mean"].as_f64().unwrap();
    assert!((v["overhead_percent"].as_f64().unwrap() - (e - n) / n * 100.0).abs() < 1e-9);
    assert_eq!(v["mode"], "direct");
}

#[test]
fn bench_proxy_is_slower_than_direct() {
    let args = [
        "bench",
        "--workload",
        "blas_dot",
        "--data-mb",
        "1",
        "--iters",
        "2000",
        "--repeats",
        "3",
    ];
    let mean = |mode: &str| {
        let out = cracsim(&[&args[..], &["--mode", mode]].concat());
        assert!(out.status.success());
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        v["e_seconds"]["mean"].as_f64().unwrap()
    };
    assert!(mean("proxy") > mean("direct"));
}
