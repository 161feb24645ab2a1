use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn leafcam<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_leafcam"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(o: Output) -> String {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, classes: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("data{classes}_{seed}"));
    ok(leafcam([
        "synth", "--out", p(&out), "--classes", &classes.to_string(), "--per-class", "10", "--size", "16",
        "--seed", &seed.to_string(),
    ]));
    out
}

fn train(data: &Path, out: &Path, attention: &str, seed: u64, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--data", p(data), "--arch", "tiny-a", "--attention", attention, "--size", "16", "--epochs", "2",
        "--batch", "8", "--lr", "1e-3", "--seed",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    args.push(seed.to_string());
    args.extend(["--out".into(), p(out).into()]);
    args.extend(extra.iter().map(|s| s.to_string()));
    leafcam(args)
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_counts_determinism_and_refusal() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let stdout = ok(leafcam([
            "synth", "--out", p(out), "--classes", "7", "--per-class", "50", "--size", "32", "--seed", "42",
        ]));
        assert!(stdout.contains("350 images"));
        assert_eq!(stdout.lines().filter(|l| l.ends_with(" 50")).count(), 7);
    }
    let ta = tree(&a);
    assert_eq!(ta.len(), 351);
    assert_eq!(ta, tree(&b));
    assert_eq!(std::fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count(), 7);
    let args = ["synth", "--out", p(&a), "--classes", "7", "--per-class", "50", "--seed", "42"];
    assert_eq!(code(&leafcam(args)), 1);
    ok(leafcam(args.iter().chain(&["--force"])));
    assert_eq!(tree(&a), ta);
    let bad = dir.path().join("bad");
    assert_eq!(code(&leafcam(["synth", "--out", p(&bad), "--classes", "1", "--per-class", "5", "--seed", "1"])), 1);
    assert!(!bad.exists());
}

#[test]
fn training_is_byte_deterministic_and_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 3, 5);
    let outs: Vec<(Vec<u8>, Vec<u8>)> = (0..2)
        .map(|i| {
            let (m, h) = (dir.path().join(format!("m{i}.lfc")), dir.path().join(format!("h{i}.csv")));
            ok(train(&data, &m, "cbam", 7, &["--history", p(&h), "--adv-train", "--epsilon", "0.01"]));
            (std::fs::read(&m).unwrap(), std::fs::read(&h).unwrap())
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
    let history = String::from_utf8(outs[0].1.clone()).unwrap();
    assert!(history.starts_with("epoch,lr,train_loss,train_acc,val_loss,val_acc\n"));
    assert_eq!(history.lines().count(), 3);
    // a different seed gives a different model
    let other = dir.path().join("other.lfc");
    ok(train(&data, &other, "cbam", 8, &["--adv-train"]));
    assert_ne!(std::fs::read(&other).unwrap(), outs[0].0);

    let missing = dir.path().join("missing.lfc");
    assert_eq!(code(&train(&dir.path().join("nope"), &missing, "se", 1, &[])), 2);
    assert_eq!(code(&train(&data, &missing, "se", 1, &["--epsilon", "0.1"])), 1);
    assert_eq!(code(&train(&data, &missing, "se", 1, &["--batch", "0"])), 1);
    assert_eq!(code(&train(&data, &missing, "mlp", 1, &[])), 1);
    assert!(!missing.exists());
}

fn report_without_model(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("model");
    v
}

#[test]
fn eval_single_ensemble_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = synth(d, 3, 5);
    let models: Vec<PathBuf> = ["none", "se", "cbam"]
        .iter()
        .enumerate()
        .map(|(i, att)| {
            let m = d.join(format!("{att}.lfc"));
            ok(train(&data, &m, att, 11 + i as u64, &[]));
            m
        })
        .collect();
    let eval = |ms: &[&PathBuf], report: &Path, extra: &[&str]| {
        let mut args: Vec<String> = vec!["eval".into()];
        for m in ms {
            args.extend(["--model".into(), p(m).into()]);
        }
        args.extend(["--data", p(&data), "--split", "test", "--seed", "11", "--report", p(report)].map(String::from));
        args.extend(extra.iter().map(|s| s.to_string()));
        leafcam(args)
    };
    let (single, twice) = (d.join("single.json"), d.join("twice.json"));
    ok(eval(&[&models[0]], &single, &[]));
    ok(eval(&[&models[0], &models[0]], &twice, &[]));
    assert_eq!(report_without_model(&single), report_without_model(&twice));

    let (ens, dump) = (d.join("ens.json"), d.join("probs.csv"));
    ok(eval(&models.iter().collect::<Vec<_>>(), &ens, &["--dump-probs", p(&dump)]));
    let again = d.join("ens2.json");
    ok(eval(&models.iter().collect::<Vec<_>>(), &again, &[]));
    assert_eq!(std::fs::read(&ens).unwrap(), std::fs::read(&again).unwrap());

    // recompute the ensemble accuracy from the dumped member rows
    let text = std::fs::read_to_string(&dump).unwrap();
    let mut rows: Vec<(usize, String, usize, Vec<f64>)> = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let probs = f[3..].iter().map(|v| v.parse::<f32>().unwrap() as f64).collect();
        rows.push((f[0].parse().unwrap(), f[1].to_string(), f[2].parse().unwrap(), probs));
    }
    let n = rows.len() / 3;
    assert_eq!(n * 3, rows.len());
    let mut correct = 0;
    for i in 0..n {
        let members: Vec<_> = (0..3).map(|m| &rows[m * n + i]).collect();
        assert!(members.iter().enumerate().all(|(m, r)| r.0 == m && r.1 == members[0].1));
        let mean: Vec<f64> = (0..3).map(|c| members.iter().map(|r| r.3[c]).sum::<f64>() / 3.0).collect();
        let top = (0..3).fold(0, |b, c| if mean[c] > mean[b] { c } else { b });
        correct += usize::from(top == members[0].2);
    }
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&ens).unwrap()).unwrap();
    let want = correct as f64 / n as f64;
    assert!((v["accuracy"].as_f64().unwrap() - want).abs() <= 5e-7, "{} vs {want}", v["accuracy"]);
    assert_eq!(v["n"].as_u64().unwrap() as usize, n);
    assert!(v["model"].as_str().unwrap().starts_with("ensemble("));

    let r = d.join("err.json");
    assert_eq!(code(&eval(&[&d.join("nope.lfc")], &r, &[])), 2);
    assert_eq!(code(&eval(&[&models[0], &models[1]], &r, &["--weights", "1,2,3"])), 1);
    let four = synth(d, 4, 5);
    let m4 = d.join("four.lfc");
    ok(train(&four, &m4, "none", 1, &[]));
    assert_eq!(code(&eval(&[&models[0], &m4], &r, &[])), 1);
    std::fs::write(d.join("junk.lfc"), b"LFC1junk").unwrap();
    assert_eq!(code(&eval(&[&d.join("junk.lfc")], &r, &[])), 2);
    assert!(!r.exists());
}

#[test]
fn gradcam_outputs_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = synth(d, 3, 6);
    let m = d.join("m.lfc");
    ok(train(&data, &m, "cbam", 3, &[]));
    let image = data.join("class_01/class_01_00003.ppm");
    let run = |class: &str, out: &Path| leafcam(["gradcam", "--model", p(&m), "--image", p(&image), "--class", class, "--out", p(out)]);
    let auto = d.join("auto");
    let stdout = ok(run("auto", &auto));
    let predicted: usize = stdout.split_whitespace().nth(1).unwrap().parse().unwrap();
    let explicit = d.join("explicit");
    ok(run(&predicted.to_string(), &explicit));
    for suffix in [".heatmap.ppm", ".overlay.ppm"] {
        let a = std::fs::read(format!("{}{suffix}", p(&auto))).unwrap();
        assert_eq!(a, std::fs::read(format!("{}{suffix}", p(&explicit))).unwrap());
        assert!(a.starts_with(b"P6\n16 16\n255\n"));
        assert_eq!(a.len(), b"P6\n16 16\n255\n".len() + 16 * 16 * 3);
    }
    let bad = d.join("bad");
    assert_eq!(code(&run("3", &bad)), 1);
    assert_eq!(code(&run("x", &bad)), 1);
    assert!(!d.join("bad.heatmap.ppm").exists() && !d.join("bad.overlay.ppm").exists());
    let missing = leafcam(["gradcam", "--model", p(&m), "--image", p(&d.join("no.ppm")), "--out", p(&bad)]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn help_and_unknown_commands() {
    assert_eq!(code(&leafcam(["--help"])), 0);
    assert_eq!(code(&leafcam(["fly"])), 1);
    assert_eq!(code(&leafcam::<[&str; 0], &str>([])), 1);
}
