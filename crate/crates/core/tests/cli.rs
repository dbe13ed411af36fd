use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hookmil::data::{encode_bag, write_bag};
use hookmil::Matrix;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hookmil"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(
        out.status.success(),
        "hookmil {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn read_csv(p: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

/// Small co-occurrence dataset plus a trained checkpoint.
struct Fixture {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    model: PathBuf,
}

fn fixture(extra: &[&str]) -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let model = tmp.path().join("model");
    ok(&[
        "gen-data", "--task", "cooccurrence", "--train-bags", "24", "--val-bags", "12", "--test-bags", "12",
        "--n-min", "16", "--n-max", "40", "--out", &s(&data),
    ]);
    let mut args = vec!["train", "--data", &s(&data), "--out", &s(&model), "--epochs", "3", "--lr", "1e-3"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    args.extend(extra.iter().map(|a| a.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&refs);
    Fixture { _tmp: tmp, data, model }
}

#[test]
fn gen_data_defaults_write_350_bags_and_3_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["gen-data", "--out", &s(tmp.path())]);
    assert_eq!(out, "train: 200 bags\nval: 50 bags\ntest: 100 bags\n");
    assert_eq!(std::fs::read_dir(tmp.path().join("bags")).unwrap().count(), 350);
    for m in ["train.tsv", "val.tsv", "test.tsv"] {
        assert!(tmp.path().join(m).is_file());
    }
}

#[test]
fn unknown_config_key_is_named_and_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "dim=16\nfoo=1\n").unwrap();
    let out = bin(&["gen-data", "--config", &s(&cfg), "--out", &s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`foo`"));
}

#[test]
fn config_file_values_apply_and_flags_override_them() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "train_bags=6\nval_bags=4\ntest_bags=2\nn_min=4\nn_max=8\n").unwrap();
    let out = ok(&["gen-data", "--config", &s(&cfg), "--val-bags", "3", "--out", &s(&tmp.path().join("d"))]);
    assert_eq!(out, "train: 6 bags\nval: 3 bags\ntest: 2 bags\n");
}

#[test]
fn train_writes_checkpoint_and_metrics() {
    let f = fixture(&[]);
    let rows = read_csv(&f.model.join("metrics.csv"));
    assert_eq!(rows[0].join(","), "epoch,total_loss,ce,div,acc,macro_f1,macro_auc,hook_sim");
    assert_eq!(rows.len(), 4);
    assert!(f.model.join("best.hkck").is_file());
}

#[test]
fn lambda_zero_and_abmil() {
    let f = fixture(&["--lambda", "0"]);
    let rows = read_csv(&f.model.join("metrics.csv"));
    for r in &rows[1..] {
        // total == ce when the penalty weight is zero.
        assert_eq!(r[1], r[2]);
    }
    let f = fixture(&["--model", "abmil"]);
    let rows = read_csv(&f.model.join("metrics.csv"));
    assert!(rows[1..].iter().all(|r| r[3] == "0" && r[7] == "0"));
}

#[test]
fn external_hook_vectors() {
    let tmp = tempfile::tempdir().unwrap();
    let hooks = tmp.path().join("hooks.hkb");
    let k8 = Matrix::from_vec(8, 32, (0..256).map(|i| (i as f64 * 0.37).sin() * 0.1).collect()).unwrap();
    write_bag(&hooks, &k8).unwrap();
    let init = format!("external:{}", s(&hooks));
    let f = fixture(&["--hook-init", &init]);
    assert!(f.model.join("best.hkck").is_file());

    let wrong = tmp.path().join("wrong.hkb");
    write_bag(&wrong, &Matrix::zeros(4, 32)).unwrap();
    let data = tmp.path().join("d");
    ok(&["gen-data", "--train-bags", "4", "--val-bags", "2", "--test-bags", "2", "--out", &s(&data)]);
    let out = bin(&[
        "train", "--data", &s(&data), "--out", &s(&tmp.path().join("m")), "--epochs", "1", "--hook-init",
        &format!("external:{}", s(&wrong)),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("8x32"));
}

#[test]
fn eval_reproduces_best_epoch_and_writes_predictions() {
    let f = fixture(&[]);
    let eval = f.model.join("eval");
    ok(&[
        "eval", "--checkpoint", &s(&f.model.join("best.hkck")), "--manifest", &s(&f.data.join("val.tsv")),
        "--out", &s(&eval),
    ]);
    let logged = read_csv(&f.model.join("metrics.csv"));
    let auc_col = 6;
    let best = logged[1..]
        .iter()
        .max_by(|a, b| {
            let (x, y): (f64, f64) = (a[auc_col].parse().unwrap(), b[auc_col].parse().unwrap());
            // Earlier epoch wins ties.
            x.total_cmp(&y).then(b[0].parse::<usize>().unwrap().cmp(&a[0].parse().unwrap()))
        })
        .unwrap();
    let got = read_csv(&eval.join("eval_metrics.csv"));
    assert_eq!(got[1][1..], best[1..]);

    let preds = read_csv(&eval.join("predictions.csv"));
    assert_eq!(preds[0].join(","), "bag_id,label,argmax,p0,p1");
    assert_eq!(preds.len() - 1, 12);
    for r in &preds[1..] {
        let sum: f64 = r[3..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn inspect_dumps_attention_and_similarity() {
    let f = fixture(&["-k", "4"]);
    let bag = f.data.join("bags").join("test_0000.hkb");
    let dump = f.model.join("inspect");
    ok(&["inspect", "--checkpoint", &s(&f.model.join("best.hkck")), "--bag", &s(&bag), "--out", &s(&dump)]);
    let att = read_csv(&dump.join("hook_attention.csv"));
    assert_eq!(att.len() - 1, 4);
    for r in &att[1..] {
        let sum: f64 = r[1..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
    let n = att[0].len() - 1;
    let pool = read_csv(&dump.join("pooling.csv"));
    assert_eq!(pool.len() - 1, n);
    let sim = read_csv(&dump.join("similarity.csv"));
    let v = |i: usize, j: usize| sim[i + 1][j + 1].parse::<f64>().unwrap();
    for i in 0..4 {
        for j in 0..4 {
            assert!((v(i, j) - v(j, i)).abs() < 1e-12);
        }
    }
}

#[test]
fn sweeps_write_one_row_per_value() {
    let f = fixture(&[]);
    let out = f.model.join("lambda.csv");
    ok(&[
        "sweep-lambda", "--data", &s(&f.data), "--lambdas", "0,0.2,1", "--epochs", "1", "--out", &s(&out),
    ]);
    let rows = read_csv(&out);
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().skip(1).map(|r| r[0].as_str()).collect::<Vec<_>>(), ["0", "0.2", "1"]);

    let out = f.model.join("hooks.csv");
    ok(&["sweep-hooks", "--data", &s(&f.data), "--hooks-grid", "1,2", "--epochs", "1", "--out", &s(&out)]);
    assert_eq!(read_csv(&out).len(), 3);
}

#[test]
fn bench_writes_one_row_per_size() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench.csv");
    ok(&["bench", "--n-grid", "64,128,256", "--dim", "16", "--repeats", "3", "--out", &s(&out)]);
    let rows = read_csv(&out);
    assert_eq!(rows[0].join(","), "N,hook_ms,dense_ms");
    assert_eq!(rows.len(), 4);
}

#[test]
fn format_errors_exit_2_and_validation_errors_exit_1() {
    let f = fixture(&[]);
    let tmp = tempfile::tempdir().unwrap();
    let junk = tmp.path().join("junk.hkck");
    std::fs::write(&junk, b"nope").unwrap();
    let out = bin(&["eval", "--checkpoint", &s(&junk), "--manifest", &s(&f.data.join("val.tsv")), "--out", &s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));

    let bad_bag = tmp.path().join("bad.hkb");
    let mut bytes = encode_bag(&Matrix::zeros(3, 32));
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&bad_bag, bytes).unwrap();
    let out = bin(&["inspect", "--checkpoint", &s(&f.model.join("best.hkck")), "--bag", &s(&bad_bag), "--out", &s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));

    let narrow = tmp.path().join("narrow.hkb");
    write_bag(&narrow, &Matrix::zeros(3, 16)).unwrap();
    let out = bin(&["inspect", "--checkpoint", &s(&f.model.join("best.hkck")), "--bag", &s(&narrow), "--out", &s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));

    let out = bin(&["train", "--data", &s(&f.data), "--out", &s(tmp.path()), "--epochs", "0"]);
    assert_eq!(out.status.code(), Some(1));

    let out = bin(&["train", "--data", &s(&tmp.path().join("missing")), "--out", &s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_manifest_is_a_no_bags_error() {
    let tmp = tempfile::tempdir().unwrap();
    for m in ["train.tsv", "val.tsv"] {
        std::fs::write(tmp.path().join(m), "# empty\n").unwrap();
    }
    let out = bin(&["train", "--data", &s(tmp.path()), "--out", &s(&tmp.path().join("m"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no bags"));
}
