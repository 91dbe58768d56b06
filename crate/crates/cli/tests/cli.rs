use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use peftkit::checkpoint;
use peftkit::evalkit::MetricReport;
use peftkit::model::{parameter_layout, TransformerConfig, Weight};
use tempfile::TempDir;

const SMALL: [&str; 10] = [
    "--d-model",
    "16",
    "--n-heads",
    "2",
    "--n-layers",
    "1",
    "--d-ff",
    "32",
    "--max-seq-len",
    "64",
];

fn peftkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_peftkit"))
        .current_dir(dir)
        .env_remove("PEFTKIT_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = peftkit(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    peftkit(dir, args).status.code().unwrap()
}

fn init_small(dir: &Path, out: &str, seed: &str) {
    let mut args = vec!["init", "--out", out, "--seed", seed];
    args.extend(SMALL);
    ok(dir, &args);
}

fn checkpoint_bytes(dir: &Path) -> (Vec<u8>, Vec<u8>) {
    (
        fs::read(dir.join(checkpoint::MANIFEST_FILE)).unwrap(),
        fs::read(dir.join(checkpoint::BLOB_FILE)).unwrap(),
    )
}

fn dataset(dir: &Path) -> PathBuf {
    let path = dir.join("data.jsonl");
    let lines: String = ["abc", "xyz", "hello", "rust"]
        .iter()
        .map(|w| {
            format!(
                "{{\"instruction\":\"up\",\"input\":\"{w}\",\"output\":\"{}\"}}\n",
                w.to_uppercase()
            )
        })
        .collect();
    fs::write(&path, lines).unwrap();
    path
}

#[test]
fn init_is_seed_deterministic_and_guarded() {
    let t = TempDir::new().unwrap();
    init_small(t.path(), "a", "3");
    init_small(t.path(), "b", "3");
    init_small(t.path(), "c", "4");
    assert_eq!(
        checkpoint_bytes(&t.path().join("a")),
        checkpoint_bytes(&t.path().join("b"))
    );
    assert_ne!(
        checkpoint_bytes(&t.path().join("a")).1,
        checkpoint_bytes(&t.path().join("c")).1
    );
    assert_eq!(code(t.path(), &["init", "--out", "a"]), 2);
    assert_eq!(
        code(
            t.path(),
            &["init", "--out", "x", "--d-model", "10", "--n-heads", "4"]
        ),
        2
    );
    assert!(t.path().join("a/run.json").exists());
}

#[test]
fn desk_manifest_lists_every_tensor() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["init", "--out", "desk"]);
    let m = checkpoint::load_manifest(&t.path().join("desk")).unwrap();
    let names: Vec<String> = m.tensors.iter().map(|e| e.name.clone()).collect();
    let expected: Vec<String> = parameter_layout(&TransformerConfig::desk())
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    assert_eq!(names, expected);
    assert_eq!(names.len(), 3 + 2 * (6 + 2 + 4));
    assert!(names.contains(&"layers.1.ffn2.weight".to_string()));
}

#[test]
fn env_seed_is_overridden_by_flag() {
    let t = TempDir::new().unwrap();
    let run = |out: &str, env: &str, flag: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_peftkit"));
        cmd.current_dir(t.path())
            .env("PEFTKIT_SEED", env)
            .args(["init", "--out", out])
            .args(SMALL);
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        assert!(cmd.output().unwrap().status.success());
    };
    run("env7", "7", None);
    run("flag7", "1", Some("7"));
    run("env1", "1", None);
    let p = |d: &str| checkpoint_bytes(&t.path().join(d));
    assert_eq!(p("env7"), p("flag7"));
    assert_ne!(p("env7").1, p("env1").1);
}

#[test]
fn quantize_reports_sizes_and_bounds_error() {
    let t = TempDir::new().unwrap();
    init_small(t.path(), "base", "0");
    let out = ok(
        t.path(),
        &["quantize", "--in", "base", "--out", "q", "--block", "16"],
    );
    assert!(
        out.contains("size before:") && out.contains("size after:"),
        "{out}"
    );
    assert!(out.contains("8.00x"), "{out}");
    assert_eq!(
        code(
            t.path(),
            &["quantize", "--in", "base", "--out", "q5", "--bits", "8"]
        ),
        2
    );
    assert_eq!(code(t.path(), &["quantize", "--in", "q", "--out", "qq"]), 2);

    let f = checkpoint::load_model(&t.path().join("base")).unwrap();
    let q = checkpoint::load_model(&t.path().join("q")).unwrap();
    for (name, w) in q.params() {
        let orig = f.param(name).unwrap().to_f32();
        match w {
            Weight::Q4(m) => {
                let deq = m.dequantize();
                for (block, (o, d)) in orig
                    .data()
                    .chunks(16)
                    .zip(deq.data().chunks(16))
                    .enumerate()
                {
                    let absmax = o.iter().fold(0f32, |a, v| a.max(v.abs()));
                    for (x, y) in o.iter().zip(d) {
                        assert!(
                            (x - y).abs() <= absmax / 14.0 + 1e-7,
                            "{name} block {block}"
                        );
                    }
                }
            }
            Weight::F32(t) => assert_eq!(t, &orig, "{name} must stay dense"),
        }
    }
    let tokens = [256, 104, 105];
    let a = f.logits(&tokens, None).unwrap();
    let b = q.dequantized().logits(&tokens, None).unwrap();
    assert!(b.all_finite());
    assert!(a.max_abs_diff(&b) < 1.0);
}

#[test]
fn finetune_is_reproducible_and_leaves_base_alone() {
    let t = TempDir::new().unwrap();
    init_small(t.path(), "base", "0");
    dataset(t.path());
    let before = checkpoint_bytes(&t.path().join("base"));
    let args = |out: &'static str| {
        [
            "finetune",
            "--base",
            "base",
            "--dataset",
            "data.jsonl",
            "--out",
            out,
            "--rank",
            "2",
            "--epochs",
            "2",
            "--seed",
            "5",
        ]
    };
    ok(t.path(), &args("ad1"));
    ok(t.path(), &args("ad2"));
    assert_eq!(
        checkpoint_bytes(&t.path().join("ad1")),
        checkpoint_bytes(&t.path().join("ad2"))
    );
    assert_eq!(checkpoint_bytes(&t.path().join("base")), before);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(t.path().join("ad1/report.json")).unwrap())
            .unwrap();
    assert_eq!(
        report["base_checksum_before"],
        report["base_checksum_after"]
    );
    assert_eq!(report["epoch_losses"].as_array().unwrap().len(), 2);
    let rendered = ok(t.path(), &["report", "ad1/report.json"]);
    assert!(rendered.contains("trainable parameters"));
}

#[test]
fn zero_epoch_adapters_merge_to_the_base() {
    let t = TempDir::new().unwrap();
    init_small(t.path(), "base", "2");
    dataset(t.path());
    ok(
        t.path(),
        &[
            "finetune",
            "--base",
            "base",
            "--dataset",
            "data.jsonl",
            "--out",
            "ad",
            "--epochs",
            "0",
            "--sites",
            "q,v,ffn1",
        ],
    );
    let (set, _) = checkpoint::load_adapters(&t.path().join("ad")).unwrap();
    assert_eq!(set.len(), 3);
    ok(
        t.path(),
        &[
            "merge",
            "--base",
            "base",
            "--adapters",
            "ad",
            "--out",
            "merged",
        ],
    );
    let base = checkpoint::load_model(&t.path().join("base")).unwrap();
    let merged = checkpoint::load_model(&t.path().join("merged")).unwrap();
    assert_eq!(merged.params().len(), base.params().len());
    assert_eq!(merged, base);
    let m = checkpoint::load_manifest(&t.path().join("merged")).unwrap();
    assert!(m.adapters.is_none());
    assert!(m.tensors.iter().all(|e| !e.name.contains("lora")));
}

#[test]
fn trained_adapters_merge_within_tolerance() {
    let t = TempDir::new().unwrap();
    init_small(t.path(), "base", "1");
    dataset(t.path());
    ok(
        t.path(),
        &[
            "finetune",
            "--base",
            "base",
            "--dataset",
            "data.jsonl",
            "--out",
            "ad",
            "--epochs",
            "3",
            "--lr",
            "0.01",
        ],
    );
    ok(
        t.path(),
        &[
            "merge",
            "--base",
            "base",
            "--adapters",
            "ad",
            "--out",
            "merged",
        ],
    );
    let base = checkpoint::load_model(&t.path().join("base")).unwrap();
    let (set, _) = checkpoint::load_adapters(&t.path().join("ad")).unwrap();
    let merged = checkpoint::load_model(&t.path().join("merged")).unwrap();
    let tokens = [256, 117, 112, 10, 97];
    let attached = base.logits(&tokens, Some(&set)).unwrap();
    let folded = merged.logits(&tokens, None).unwrap();
    assert!(attached.max_abs_diff(&folded) <= 1e-5);
    assert!(attached.max_abs_diff(&base.logits(&tokens, None).unwrap()) > 0.0);
}

#[test]
fn merge_rejects_non_lora_adapters() {
    let t = TempDir::new().unwrap();
    init_small(t.path(), "base", "0");
    dataset(t.path());
    ok(
        t.path(),
        &[
            "finetune",
            "--base",
            "base",
            "--dataset",
            "data.jsonl",
            "--out",
            "pre",
            "--method",
            "prefix",
            "--rank",
            "2",
            "--epochs",
            "0",
        ],
    );
    assert_eq!(
        code(
            t.path(),
            &["merge", "--base", "base", "--adapters", "pre", "--out", "m"]
        ),
        2
    );
    ok(
        t.path(),
        &[
            "init",
            "--out",
            "wide",
            "--d-model",
            "32",
            "--n-heads",
            "2",
            "--n-layers",
            "1",
            "--d-ff",
            "32",
            "--max-seq-len",
            "64",
        ],
    );
    ok(
        t.path(),
        &[
            "finetune",
            "--base",
            "base",
            "--dataset",
            "data.jsonl",
            "--out",
            "ad",
            "--epochs",
            "0",
        ],
    );
    assert_eq!(
        code(
            t.path(),
            &["merge", "--base", "wide", "--adapters", "ad", "--out", "m2"]
        ),
        2
    );
}

fn choice_file(path: &Path, correct: usize) {
    let lines: String = (0..100)
        .map(|i| {
            let pred = if i < correct { 0 } else { 1 };
            format!("{{\"question\":\"q{i}\",\"choices\":[\"yes\",\"no\"],\"truth_index\":0,\"prediction_index\":{pred}}}\n")
        })
        .collect();
    fs::write(path, lines).unwrap();
}

#[test]
fn eval_reproduces_knowledge_loss_from_prediction_files() {
    let t = TempDir::new().unwrap();
    choice_file(&t.path().join("base.jsonl"), 47);
    choice_file(&t.path().join("ft.jsonl"), 34);
    let table = ok(
        t.path(),
        &[
            "eval",
            "--task",
            "base.jsonl",
            "--kind",
            "choice",
            "--base-predictions",
            "base.jsonl",
            "--ft-predictions",
            "ft.jsonl",
            "--ci-base",
            "5.02",
            "--ci-ft",
            "4.76",
            "--out",
            "r.json",
        ],
    );
    assert!(
        table.contains("Knowledge Loss") && table.contains("13.00% ± 6.92%"),
        "{table}"
    );
    let r: MetricReport =
        serde_json::from_str(&fs::read_to_string(t.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(r.n, 100);
    assert_eq!((r.a_base, r.a_ft), (Some(47.0), Some(34.0)));
    assert_eq!(r.delta_k, 13.0);
    assert_eq!(r.delta_k_half_width, 6.92);
    assert!(t.path().join("r.json.run.json").exists());
    assert!(ok(t.path(), &["report", "r.json"]).contains("47.00%"));
}

#[test]
fn self_eval_with_a_model_is_neutral() {
    let t = TempDir::new().unwrap();
    init_small(t.path(), "base", "0");
    fs::write(
        t.path().join("num.jsonl"),
        "{\"question\":\"1+1=\",\"truth\":2}\n{\"question\":\"2+2=\",\"truth\":4}\n{\"question\":\"5+2=\",\"truth\":7}\n",
    )
    .unwrap();
    ok(
        t.path(),
        &[
            "eval",
            "--task",
            "num.jsonl",
            "--kind",
            "numeric",
            "--base",
            "base",
            "--ft",
            "base",
            "--max-new-tokens",
            "3",
            "--out",
            "r.json",
        ],
    );
    let r: MetricReport =
        serde_json::from_str(&fs::read_to_string(t.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(r.n, 3);
    assert_eq!(r.delta_a, 0.0);
    assert_eq!(r.delta_k, 0.0);
    assert!(r.forgetting_rate.is_none() || r.forgetting_rate == Some(0.0));
}

#[test]
fn eval_schema_errors_name_the_key() {
    let t = TempDir::new().unwrap();
    choice_file(&t.path().join("c.jsonl"), 10);
    let out = peftkit(
        t.path(),
        &[
            "eval",
            "--task",
            "c.jsonl",
            "--kind",
            "numeric",
            "--base-predictions",
            "c.jsonl",
            "--ft-predictions",
            "c.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("\"truth\"") || err.contains("\"question\"") || err.contains("\"choices\""),
        "{err}"
    );
    assert_eq!(
        code(t.path(), &["eval", "--task", "c.jsonl", "--kind", "choice"]),
        2
    );
    assert_eq!(
        code(
            t.path(),
            &[
                "eval",
                "--task",
                "missing.jsonl",
                "--kind",
                "choice",
                "--base-predictions",
                "c.jsonl",
                "--ft-predictions",
                "c.jsonl"
            ]
        ),
        3
    );
}

#[test]
fn malformed_dataset_is_a_data_error() {
    let t = TempDir::new().unwrap();
    init_small(t.path(), "base", "0");
    fs::write(t.path().join("bad.jsonl"), "{\"instruction\":\"x\"}\n").unwrap();
    assert_eq!(
        code(
            t.path(),
            &[
                "finetune",
                "--base",
                "base",
                "--dataset",
                "bad.jsonl",
                "--out",
                "ad"
            ]
        ),
        3
    );
    assert!(!t.path().join("ad").exists());
}
