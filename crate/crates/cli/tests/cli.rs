use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ura::config::RunConfig;
use ura::imaging::{load_paired_dataset, save_image, Image};
use ura::nets::{load_params, DerainNet};
use ura::nn::ModelParams;
use ura::seeds::derive_seed;
use ura::warp::{save_flow, FlowField};

fn ura(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ura")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "command failed: {}", stderr(&o));
    o
}

/// Small but complete configuration rooted in `dir`.
fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"[run]
seed = 11
data_dir = "{data}"
out_dir = "{out}"
checkpoint_every = 0

[synth]
train_count = 4
test_count = 3
height = 16
width = 16

[derain]
epochs = 1
batch_size = 2

[derain_net]
widths = [4, 8]
residual_blocks = 1

[attack]
epochs = 1
batch_size = 2

[generator]
noise_channels = 2
down_channels = [4, 4, 4]
residual_blocks = 1
up_channels = [4, 4]

[eval]
qualitative = 1
{extra}
"#,
        data = dir.join("data").display(),
        out = dir.join("out").display(),
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_zero_samples_writes_empty_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    ok(ura(&["synth", "-c", s(&cfg), "--set", "synth.train_count=0", "--set", "synth.test_count=0"]));
    let data = dir.path().join("data");
    for split in ["train", "test"] {
        for sub in ["rain", "clean"] {
            let d = data.join(split).join(sub);
            assert!(d.is_dir());
            assert_eq!(std::fs::read_dir(d).unwrap().count(), 0);
        }
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["train"]["count"], 0);
    assert_eq!(manifest["global_seed"], 11);
}

#[test]
fn synth_is_deterministic_and_pairs_differ() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let cfg = write_config(d.path(), "");
        ok(ura(&["synth", "-c", s(&cfg), "--set", "synth.train_count=10", "--set", "synth.mode=\"combined\""]));
    }
    for sub in ["train/rain", "train/clean", "test/rain", "test/clean"] {
        assert_eq!(
            read_dir_sorted(&a.path().join("data").join(sub)),
            read_dir_sorted(&b.path().join("data").join(sub))
        );
    }
    let train = load_paired_dataset::<f32>(a.path().join("data/train")).unwrap();
    assert_eq!(train.len(), 10);
    assert!(train.iter().all(|p| p.observation != p.background));
}

#[test]
fn missing_dataset_root_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = ura(&["train-derain", "-c", s(&cfg)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains(s(&dir.path().join("data").join("train"))), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = ura(&["synth", "-c", s(&cfg), "--set", "attack.lr=0.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("configuration"));
    assert_eq!(ura(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn zero_epochs_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "");
    ok(ura(&["synth", "-c", s(&cfg_path)]));
    ok(ura(&["train-derain", "-c", s(&cfg_path), "--set", "derain.epochs=0"]));
    let cfg = RunConfig::load(Some(&cfg_path), false, &[]).unwrap();
    let net = DerainNet::new(cfg.derain_net.clone()).unwrap();
    let saved: ModelParams<f32> = load_params(dir.path().join("out/derain.urap"), Some(net.fingerprint())).unwrap();
    assert_eq!(saved, net.init(derive_seed(cfg.derain.seed, "derain-init")));
}

#[test]
fn paper_defaults_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    ok(ura(&["synth", "-c", s(&cfg), "--set", "synth.train_count=2"]));
    let o = ok(ura(&["train-derain", "-c", s(&cfg), "--paper-defaults"]));
    let log = stderr(&o);
    let echoed: Vec<&str> = log.lines().filter(|l| l.starts_with("hyper ")).collect();
    let expected = [
        "hyper derain lr = 0.001",
        "hyper derain min lr = 0.00001",
        "hyper derain epoch = 100",
        "hyper derain batch size = 16",
        "hyper URA lr = 0.01",
        "hyper URA batch size = 100",
        "hyper URA epoch = 200",
        "hyper URA l2reg = 0.001",
        "hyper URA beta1 = 0.5",
        "hyper URA beta2 = 0.9",
        "hyper SSIM c1 = 0.0001",
        "hyper SSIM c2 = 0.0009",
        "hyper SSIM c3 = 0.00045",
    ];
    assert_eq!(echoed, expected);
    assert!(log.contains("derain epoch 100 "));
}

fn write_png(path: &Path, h: usize, w: usize, seed: usize) {
    let img = Image::<f32>::from_fn(h, w, |c, y, x| ((x * 7 + y * 3 + c * 5 + seed) % 11) as f32 / 10.0).unwrap();
    save_image(&img, path).unwrap();
}

#[test]
fn apply_identity_and_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let flow = dir.path().join("id.uraf");
    save_flow(&FlowField::<f32>::identity(16, 16, 2.0).unwrap(), &flow).unwrap();
    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    let odd = dir.path().join("odd.png");
    write_png(&a, 16, 16, 0);
    write_png(&b, 16, 16, 3);
    write_png(&odd, 16, 12, 1);
    let out = dir.path().join("out");
    ok(ura(&["apply", "--flow", s(&flow), "--out", s(&out), s(&a), s(&b)]));
    for name in ["a.png", "b.png"] {
        assert_eq!(std::fs::read(out.join(name)).unwrap(), std::fs::read(dir.path().join(name)).unwrap());
    }
    let o = ura(&["apply", "--flow", s(&flow), "--out", s(&out), s(&a), s(&odd)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("odd.png"));
}

#[test]
fn histogram_command() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("i.png");
    write_png(&img, 8, 8, 0);
    let out = dir.path().join("h.csv");
    ok(ura(&["histogram", s(&img), "--bins", "4", "--out", s(&out)]));
    let text = std::fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "channel,bin_lo,bin_hi,count");
    assert_eq!(lines.len(), 1 + 3 * 4);
    let total: u64 = lines[1..5].iter().map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total, 64);
}

fn parse_cell(v: &str) -> Option<f64> {
    match v {
        "" => None,
        "+inf" => Some(f64::INFINITY),
        x => Some(x.parse().unwrap()),
    }
}

fn json_cell(v: &serde_json::Value) -> Option<f64> {
    match v {
        serde_json::Value::Null => None,
        serde_json::Value::String(s) if s == "+inf" => Some(f64::INFINITY),
        v => Some(v.as_f64().unwrap()),
    }
}

#[test]
fn full_pipeline_identity_flow_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    ok(ura(&["synth", "-c", s(&cfg)]));
    ok(ura(&["train-derain", "-c", s(&cfg)]));
    ok(ura(&["train-attack", "-c", s(&cfg)]));
    let out = dir.path().join("out");
    let exported = dir.path().join("again.uraf");
    ok(ura(&["export-flow", "-c", s(&cfg), "--out", s(&exported)]));
    assert_eq!(std::fs::read(&exported).unwrap(), std::fs::read(out.join("flow.uraf")).unwrap());

    ok(ura(&["evaluate", "-c", s(&cfg), "--qualitative"]));
    let csv1 = std::fs::read(out.join("report.csv")).unwrap();
    assert_eq!(std::fs::read_dir(out.join("qualitative")).unwrap().count(), 10);
    ok(ura(&["evaluate", "-c", s(&cfg), "--set", "run.parallel=true"]));
    assert_eq!(std::fs::read(out.join("report.csv")).unwrap(), csv1);

    // JSON and CSV carry the same numbers
    let text = String::from_utf8(csv1).unwrap();
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        let row = &json["conditions"][cells[0]];
        for (k, v) in header.iter().zip(&cells).skip(1) {
            assert_eq!(parse_cell(v), json_cell(&row[*k]), "{} {}", cells[0], k);
        }
    }

    // identity flow: attacked row equals the unattacked one
    let id = dir.path().join("id.uraf");
    save_flow(&FlowField::<f32>::identity(16, 16, 2.0).unwrap(), &id).unwrap();
    let rep = dir.path().join("id_report");
    ok(ura(&["evaluate", "-c", s(&cfg), "--flow", s(&id), "--out", s(&rep)]));
    let text = std::fs::read_to_string(rep.join("report.csv")).unwrap();
    let row = |name: &str| -> Vec<String> {
        let l = text.lines().find(|l| l.starts_with(&format!("{name},"))).unwrap();
        l.split(',').skip(1).take(4).map(str::to_string).collect()
    };
    assert_eq!(row("derain"), row("derain-under-ura"));
}
