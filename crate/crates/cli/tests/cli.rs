use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
model.width_scale = 16
model.input_size = 32
train.epochs = 2
train.batch_size = 4
data.train_count = 8
data.test_count = 4
";

fn recal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recal"))
        .current_dir(dir)
        .env_remove("RECAL_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn setup() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("small.cfg"), SMALL).unwrap();
    d
}

#[test]
fn train_twice_gives_identical_csv_and_refuses_reuse() {
    let d = setup();
    let p = d.path();
    for out in ["a", "b"] {
        let o = recal(p, &["train", "--config", "small.cfg", "--seed", "3", "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(p.join("a/epochs.csv")).unwrap();
    assert_eq!(a, fs::read(p.join("b/epochs.csv")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 3);
    for f in ["config.txt", "best.ckpt", "last.ckpt"] {
        assert!(p.join("a").join(f).exists(), "{f}");
    }
    let cfg = fs::read_to_string(p.join("a/config.txt")).unwrap();
    assert!(cfg.contains("seed = 3\n") && cfg.contains("model.width_scale = 16\n"));

    // The echoed config alone reproduces the run.
    let o = recal(p, &["train", "--config", "a/config.txt", "--out", "c"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(p.join("a/epochs.csv")).unwrap(), fs::read(p.join("c/epochs.csv")).unwrap());

    let o = recal(p, &["train", "--config", "small.cfg", "--out", "a"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn seed_env_fallback_and_flag_precedence() {
    let d = setup();
    let p = d.path();
    let run = |env: Option<&str>, extra: &[&str], out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_recal"));
        c.current_dir(p).env_remove("RECAL_SEED");
        if let Some(s) = env {
            c.env("RECAL_SEED", s);
        }
        let o = c
            .args(["train", "--config", "small.cfg", "--epochs", "1", "--out", out])
            .args(extra)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(p.join(out).join("config.txt")).unwrap()
    };
    assert!(run(Some("11"), &[], "e").contains("seed = 11\n"));
    assert!(run(Some("11"), &["--seed", "4"], "f").contains("seed = 4\n"));
    assert!(run(None, &[], "g").contains("seed = 0\n"));
    let o = Command::new(env!("CARGO_BIN_EXE_recal"))
        .current_dir(p)
        .env("RECAL_SEED", "x")
        .args(["audit"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn eval_writes_table_and_refuses_mismatched_config() {
    let d = setup();
    let p = d.path();
    assert_eq!(code(&recal(p, &["train", "--config", "small.cfg", "--out", "r"])), 0);
    let o = recal(
        p,
        &["eval", "--config", "small.cfg", "--checkpoint", "r/best.ckpt", "--classes", "pupil,iris", "--out", "e1"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(p.join("e1/metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    assert_eq!(rows.len(), 1 + 2 + 1);
    assert!(rows[3].starts_with("overall,"));

    // The std column is the population deviation of the per-sample values.
    let samples = fs::read_to_string(p.join("e1/samples.csv")).unwrap();
    let ious: Vec<f64> = samples
        .lines()
        .skip(1)
        .filter(|l| l.starts_with("pupil,"))
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(ious.len(), 4);
    let m = ious.iter().sum::<f64>() / 4.0;
    let sd = (ious.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0).sqrt();
    let f: Vec<&str> = rows[1].split(',').collect();
    assert_eq!(f[3], format!("{:.2}", 100.0 * m));
    assert_eq!(f[4], format!("{:.2}", 100.0 * sd));

    let again = recal(
        p,
        &["eval", "--config", "small.cfg", "--checkpoint", "r/best.ckpt", "--classes", "pupil,iris", "--out", "e2"],
    );
    assert_eq!(code(&again), 0);
    assert_eq!(metrics, fs::read_to_string(p.join("e2/metrics.csv")).unwrap());
    assert_eq!(samples, fs::read_to_string(p.join("e2/samples.csv")).unwrap());

    let o = recal(p, &["eval", "--config", "small.cfg", "--variant", "baseline", "--checkpoint", "r/best.ckpt", "--out", "e3"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("digest"));
}

#[test]
fn dump_activations_names_and_sizes() {
    let d = setup();
    let p = d.path();
    assert_eq!(code(&recal(p, &["train", "--config", "small.cfg", "--out", "r"])), 0);
    assert_eq!(
        code(&recal(p, &["train", "--config", "small.cfg", "--variant", "baseline", "--out", "rb"])),
        0
    );
    let o = recal(
        p,
        &["dump-activations", "--checkpoint", "r/best.ckpt", "--checkpoint", "rb/best.ckpt", "--stages", "E5,D1", "--out", "act"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for (name, side) in [("recal_E5", 2u32), ("recal_D1", 32), ("baseline_E5", 2), ("baseline_D1", 32)] {
        let dec = png::Decoder::new(fs::File::open(p.join("act").join(format!("{name}.png"))).unwrap());
        let info = dec.read_info().unwrap().info().clone();
        assert_eq!((info.width, info.height), (side, side), "{name}");
    }
    let o = recal(p, &["dump-activations", "--checkpoint", "r/best.ckpt", "--out", "act2", "--stages", "E5,D1"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(p.join("act/recal_D1.png")).unwrap(), fs::read(p.join("act2/recal_D1.png")).unwrap());

    let o = recal(p, &["dump-activations", "--checkpoint", "r/best.ckpt", "--stages", "E9", "--out", "act3"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn generate_data_then_train_from_disk() {
    let d = setup();
    let p = d.path();
    let o = recal(p, &["generate-data", "--config", "small.cfg", "--classes", "lens", "--out", "data"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(p.join("data/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 8 + 4);
    assert!(p.join("data/lens/test/lens-test-00003_mask.png").exists());

    fs::write(p.join("disk.cfg"), format!("{SMALL}data.root = data\ndata.class = lens\n")).unwrap();
    let o = recal(p, &["train", "--config", "disk.cfg", "--epochs", "1", "--out", "r"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn exit_codes() {
    let d = setup();
    let p = d.path();
    fs::write(p.join("bad.cfg"), "train.learning_rate = 1\n").unwrap();
    let o = recal(p, &["train", "--config", "bad.cfg", "--out", "x"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));
    assert!(!p.join("x").exists());

    assert_eq!(code(&recal(p, &["gradcheck", "block:nope"])), 1);
    assert_eq!(code(&recal(p, &["frobnicate"])), 1);
    assert_eq!(code(&recal(p, &["--help"])), 0);

    fs::write(p.join("nan.cfg"), format!("{SMALL}train.lr = 1e300\n")).unwrap();
    let o = recal(p, &["train", "--config", "nan.cfg", "--out", "n"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn audit_and_gradcheck_pass() {
    let d = setup();
    let p = d.path();
    let o = recal(p, &["audit", "--out", "audit"]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("recal,e5,512,273412,273412,273412,"));
    assert!(stdout.contains("recal - scse calibration weights: 20852"));
    assert!(p.join("audit/census.csv").exists());

    let o = recal(p, &["audit", "--width-scale", "16"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));

    let o = recal(p, &["gradcheck", "block:recal"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("PASS"));
    assert_eq!(code(&recal(p, &["gradcheck", "op:avg_pool"])), 0);
}

#[test]
fn ablation_small_grid() {
    let d = setup();
    let p = d.path();
    let o = recal(
        p,
        &["ablation", "--config", "small.cfg", "--epochs", "1", "--classes", "lens,iris", "--out", "abl"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(p.join("abl/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "learning_rate,network,lens,iris");
    assert_eq!(lines.len(), 5);
    assert!(p.join("abl/0.005_recal_iris_epochs.csv").exists());
}
