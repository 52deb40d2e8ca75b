use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_speckformer"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, v: &Value) -> String {
    std::fs::write(dir.join(name), serde_json::to_string_pretty(v).unwrap()).unwrap();
    name.to_owned()
}

fn small_model(variant: &str) -> Value {
    json!({"variant": variant, "image_size": 32, "patch_size": 8, "embed_dim": 8, "num_blocks": 2,
           "num_heads": 2, "ffn_dim": 16, "head_hidden": 16, "window_size": 2, "shift_size": 1,
           "conv_channels": [4, 8]})
}

/// Eight 32×32 synthetic samples at 1 °C spacing.
fn smoke(variant: &str, epochs: usize) -> Value {
    json!({
        "data": {"synthetic": {"image_size": 32, "t_min": 0.0, "t_max": 7.0, "t_step": 1.0}},
        "model": small_model(variant),
        "train": {"epochs": epochs, "batch_size": 4},
        "output_dir": "out"
    })
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

#[test]
fn help_on_every_subcommand() {
    let flags: &[(&str, &[&str])] = &[
        ("generate", &["--out", "--t-step"]),
        ("preprocess", &["--out"]),
        (
            "train",
            &["--output-dir", "--epochs", "--variant", "--resume"],
        ),
        ("evaluate", &["--checkpoint", "--split", "--out"]),
        ("explain", &["--checkpoint", "--image", "--out"]),
    ];
    let tmp = tempfile::tempdir().unwrap();
    for (cmd, own) in flags {
        let text = ok(tmp.path(), &[cmd, "--help"]);
        for f in own
            .iter()
            .chain(&["--config", "--seed", "--print-defaults"])
        {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
    assert!(ok(tmp.path(), &["--help"]).contains("generate"));
}

#[test]
fn print_defaults_is_a_loadable_config() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(tmp.path(), &["--print-defaults"]);
    let v: Value = serde_json::from_str(&text).unwrap();
    for key in ["data", "preprocess", "model", "train", "output_dir"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(v["train"]["epochs"], 100);
    assert_eq!(
        v["data"]["split"],
        json!({"train": 70, "val": 20, "test": 10})
    );
    std::fs::write(tmp.path().join("d.json"), &text).unwrap();
    assert_eq!(
        ok(tmp.path(), &["--config", "d.json", "--print-defaults"]),
        text
    );
}

#[test]
fn bad_configs_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let name = write_config(
        tmp.path(),
        "bad.json",
        &json!({"train": {"epochs": 1, "momentum": 0.9}}),
    );
    let out = run(tmp.path(), &["train", "--config", &name]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("momentum"));

    let name = write_config(
        tmp.path(),
        "m.json",
        &json!({"data": {"manifest": "missing/manifest.csv"}}),
    );
    let out = run(tmp.path(), &["train", "--config", &name]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing/manifest.csv"));

    assert_eq!(
        run(tmp.path(), &["train", "--variant", "resnet"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(run(tmp.path(), &[]).status.code(), Some(2));
}

#[test]
fn generate_counts_and_repeats_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    assert!(ok(p, &["generate", "--out", "a"]).contains("301 samples"));
    assert_eq!(files(&p.join("a")).len(), 302);
    ok(p, &["generate", "--out", "b"]);
    assert_eq!(files(&p.join("a")), files(&p.join("b")));
    assert!(ok(p, &["generate", "--out", "c", "--t-step", "0.2"]).contains("601 samples"));
    let manifest = std::fs::read_to_string(p.join("c/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 602);
    assert!(manifest.lines().last().unwrap().ends_with(",120"));
}

#[test]
fn preprocess_writes_model_sized_images() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg =
        json!({"data": {"synthetic": {"t_max": 2.0, "t_step": 1.0}}, "model": {"variant": "vit"}});
    let name = write_config(tmp.path(), "p.json", &cfg);
    assert!(ok(
        tmp.path(),
        &["preprocess", "--config", &name, "--out", "pre"]
    )
    .contains("3 preprocessed"));
    let pgm = std::fs::read(tmp.path().join("pre/speckle_0000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n126 126\n255\n"));
}

#[test]
fn train_smoke_then_resume_continues_numbering() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let name = write_config(p, "s.json", &smoke("vit", 2));
    let start = Instant::now();
    ok(p, &["train", "--config", &name]);
    assert!(start.elapsed().as_secs() < 60);
    for f in [
        "checkpoint.spkf",
        "last.spkf",
        "history.csv",
        "metrics.json",
        "config.json",
    ] {
        assert!(p.join("out").join(f).exists(), "{f}");
    }
    ok(
        p,
        &[
            "train",
            "--config",
            &name,
            "--epochs",
            "4",
            "--resume",
            "out/last.spkf",
        ],
    );
    let hist = std::fs::read_to_string(p.join("out/history.csv")).unwrap();
    let epochs: Vec<&str> = hist
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(epochs, ["1", "2", "3", "4"]);

    // same as four epochs in one go
    ok(
        p,
        &[
            "train",
            "--config",
            &name,
            "--epochs",
            "4",
            "--output-dir",
            "full",
        ],
    );
    let (a, b) = (files(&p.join("out")), files(&p.join("full")));
    assert_eq!(a["history.csv"], b["history.csv"]);
    assert_eq!(a["metrics.json"], b["metrics.json"]);
}

#[test]
fn evaluate_reports_the_metric_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let name = write_config(p, "s.json", &smoke("gat_vit", 1));
    ok(p, &["train", "--config", &name]);
    let text = ok(
        p,
        &[
            "evaluate",
            "--split",
            "all",
            "--checkpoint",
            "out/checkpoint.spkf",
            "--out",
            "m.json",
        ],
    );
    let v: Value = serde_json::from_str(&text).unwrap();
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    assert_eq!(keys.len(), 6);
    for k in ["mse", "mae", "rmse", "max_error", "r2", "n"] {
        assert!(v.get(k).is_some(), "{k}");
    }
    assert_eq!(v["n"], 8);
    assert_eq!(
        std::fs::read_to_string(p.join("m.json")).unwrap().trim(),
        text.trim()
    );
}

#[test]
fn constant_targets_leave_r2_undefined() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let gen = write_config(p, "g.json", &smoke("vit", 1));
    ok(p, &["generate", "--config", &gen, "--out", "ds"]);
    let manifest = std::fs::read_to_string(p.join("ds/manifest.csv")).unwrap();
    let constant: String = manifest
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 0 {
                format!("{l}\n")
            } else {
                format!("{},25\n", l.split(',').next().unwrap())
            }
        })
        .collect();
    std::fs::write(p.join("ds/manifest.csv"), constant).unwrap();
    let mut cfg = smoke("vit", 1);
    cfg["data"] = json!({"manifest": "ds/manifest.csv"});
    let name = write_config(p, "c.json", &cfg);
    ok(p, &["train", "--config", &name]);
    let v: Value =
        serde_json::from_str(&ok(p, &["evaluate", "--config", &name, "--split", "test"])).unwrap();
    assert!(v["r2"].is_null());
    assert_eq!(v["n"], 2);
}

#[test]
fn overfit_checkpoint_fits_its_training_data() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let mut cfg = smoke("vit", 500);
    cfg["data"]["synthetic"]["t_max"] = json!(36.0);
    cfg["data"]["synthetic"]["t_step"] = json!(4.0);
    cfg["data"]["split"] = json!({"train": 80, "val": 10, "test": 10});
    for (k, v) in [
        ("embed_dim", 32),
        ("num_heads", 4),
        ("ffn_dim", 64),
        ("head_hidden", 256),
    ] {
        cfg["model"][k] = json!(v);
    }
    cfg["model"]["dropout_rate"] = json!(0.0);
    cfg["train"]["batch_size"] = json!(8);
    let name = write_config(p, "o.json", &cfg);
    ok(p, &["train", "--config", &name]);
    let v: Value = serde_json::from_str(&ok(
        p,
        &[
            "evaluate",
            "--config",
            &name,
            "--split",
            "train",
            "--checkpoint",
            "out/last.spkf",
        ],
    ))
    .unwrap();
    assert!(v["mae"].as_f64().unwrap() < 0.5, "{v}");
}

fn explain_names(p: &Path, variant: &str, model: Value) -> (Vec<String>, String) {
    let mut cfg = smoke(variant, 1);
    cfg["model"] = model;
    cfg["output_dir"] = json!(variant);
    let name = write_config(p, &format!("{variant}.json"), &cfg);
    ok(p, &["train", "--config", &name]);
    let out = run(p, &["explain", "--config", &name]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut names: Vec<String> = files(&p.join(variant).join("explain"))
        .into_keys()
        .collect();
    names.sort();
    (names, String::from_utf8(out.stderr).unwrap())
}

#[test]
fn explain_writes_variant_file_sets() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    // default ViT: four blocks of four heads on 126×126 inputs
    let (vit, _) = explain_names(p, "vit", json!({"variant": "vit"}));
    assert_eq!(vit.len(), 18);
    assert!(vit.contains(&"attn_b3_h3.pgm".to_owned()));
    assert!(vit.contains(&"saliency.pgm".to_owned()) && vit.contains(&"overlay.ppm".to_owned()));

    let (cnn, note) = explain_names(p, "cnn", small_model("cnn"));
    assert_eq!(cnn, ["overlay.ppm", "saliency.pgm"]);
    assert!(note.contains("no attention"));

    let (lina, _) = explain_names(p, "lina_vit", small_model("lina_vit"));
    assert_eq!(lina.len(), 7);
    assert!(lina.contains(&"importance.pgm".to_owned()));

    // an explicit image path
    let out = ok(
        p,
        &[
            "explain",
            "--config",
            "lina_vit.json",
            "--image",
            "lina_vit/explain/saliency.pgm",
            "--out",
            "e2",
        ],
    );
    assert_eq!(out.lines().count(), 7);
}

#[test]
fn identical_runs_write_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let run_in = |sub: &str| {
        let d = tmp.path().join(sub);
        std::fs::create_dir_all(&d).unwrap();
        let name = write_config(&d, "s.json", &smoke("lina_vit", 3));
        ok(&d, &["train", "--config", &name, "--seed", "9"]);
        files(&d.join("out"))
    };
    let (a, b) = (run_in("a"), run_in("b"));
    assert_eq!(a, b);
    assert!(a.contains_key("checkpoint.spkf") && a.contains_key("history.csv"));
}
