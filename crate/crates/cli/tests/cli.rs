use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn partialnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partialnet")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// CIFAR-format files with learnable class templates.
fn write_cifar(dir: &Path, train: usize, test: usize) {
    let template = |c: usize, i: usize| ((c * 37 + i * 11) % 251) as u8;
    for (file, n) in [("data_batch_1.bin", train), ("test_batch.bin", test)] {
        let mut b = Vec::new();
        for r in 0..n {
            let c = r % 3;
            b.push(c as u8);
            b.extend((0..3072).map(|i| template(c, i).wrapping_add((r * 7 + i) as u8 % 9)));
        }
        fs::write(dir.join(file), b).unwrap();
    }
}

fn tiny_run_config(dir: &Path, data: &Path) -> std::path::PathBuf {
    let p = dir.join("run.txt");
    fs::write(
        &p,
        format!(
            "# tiny run\ndata_path = {}\nwidth = 16\nblocks = 1,1,1,1\nnum_classes = 10\ninput_size = 32\nepochs = 2\nbatch_size = 16\nwarmup_epochs = 0\nmixup_alpha = 0.2\n",
            data.display()
        ),
    )
    .unwrap();
    p
}

#[test]
fn count_reports_and_writes_a_manifest() {
    let out = tempfile::tempdir().unwrap();
    let o = partialnet(&["count", "--variant", "T0", "--out", out.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let total: u64 = text.lines().find(|l| l.starts_with("total")).unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
    let lib = partialnet::complexity::count(
        &partialnet::Model::<f32>::declare(&partialnet::ModelConfig::variant(partialnet::Variant::T0)).unwrap(),
        (224, 224),
    )
    .unwrap();
    assert_eq!(total, lib.total_params());
    assert!(text.contains("# params"));
    assert_eq!(fs::read_to_string(out.path().join("count.txt")).unwrap(), text);
    let manifest = fs::read_to_string(out.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("# command:") && manifest.contains("count --variant T0"));
    assert!(manifest.contains("width = 32"));

    let o = partialnet(&["count", "--all", "--format", "tsv", "--out", out.path().to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 7);
}

#[test]
fn delimited_count_has_one_row_per_layer_group() {
    let out = tempfile::tempdir().unwrap();
    let o = partialnet(&["count", "--set", "width=16", "--input", "64", "--format", "tsv", "--out", out.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.lines().last().unwrap().starts_with("total\t"));
    assert!(text.lines().all(|l| l.starts_with('#') || l.split('\t').count() >= 3));
}

#[test]
fn fuse_check_passes_on_t2() {
    let out = tempfile::tempdir().unwrap();
    let o = partialnet(&["fuse-check", "--variant", "T2", "--probes", "16", "--out", out.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("PASS"));
    assert!(fs::read_to_string(out.path().join("fusion.txt")).unwrap().contains("applied"));
}

#[test]
fn fuse_check_fails_with_exit_one_on_impossible_tolerance() {
    let out = tempfile::tempdir().unwrap();
    let o = partialnet(&[
        "fuse-check", "--set", "width=16", "--set", "input_size=64", "--probes", "2", "--tol", "0", "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("FAIL"));
}

#[test]
fn usage_errors_exit_two() {
    let o = partialnet(&["count", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    let o = partialnet(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let out = tempfile::tempdir().unwrap();
    let o = partialnet(&["count", "--set", "colour=red", "--out", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"));
    let o = partialnet(&["count", "--variant", "XL", "--out", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn search_reaches_budget_and_writes_reports() {
    let out = tempfile::tempdir().unwrap();
    let o = partialnet(&["dpconv-search", "--out", out.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("feasible at step"));
    let hist = fs::read_to_string(out.path().join("search_history.tsv")).unwrap();
    assert_eq!(hist.lines().count(), 501);
    assert!(out.path().join("split_ratios.txt").exists());
    let o = partialnet(&["dpconv-search", "--steps", "0", "--out", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_eval_and_replay_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::create_dir(&data).unwrap();
    write_cifar(&data, 48, 24);
    let cfg = tiny_run_config(dir.path(), &data);
    let run = dir.path().join("run");
    let o = partialnet(&["train", "--config", cfg.to_str().unwrap(), "--set", "seed=3", "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let history = fs::read_to_string(run.join("history.tsv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    let ckpt = fs::read(run.join("checkpoint.ckpt")).unwrap();

    // the manifest alone reproduces the run
    let replay = dir.path().join("replay");
    let o = partialnet(&["train", "--config", run.join("manifest.txt").to_str().unwrap(), "--out", replay.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(replay.join("history.tsv")).unwrap(), history);
    assert_eq!(fs::read(replay.join("checkpoint.ckpt")).unwrap(), ckpt);

    let ev = dir.path().join("eval");
    let o = partialnet(&[
        "eval", "--config", cfg.to_str().unwrap(), "--checkpoint", run.join("checkpoint.ckpt").to_str().unwrap(), "--out",
        ev.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let last = history.lines().last().unwrap().split('\t').nth(2).unwrap().parse::<f64>().unwrap();
    let got: f64 = stdout(&o).split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((got - last).abs() < 1e-4, "{got} vs {last}");

    let o = partialnet(&["train", "--config", cfg.to_str().unwrap(), "--require-top1", "1.01", "--out", run.to_str().unwrap(), "-q"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_without_data_is_a_configuration_error() {
    let out = tempfile::tempdir().unwrap();
    let o = partialnet(&["train", "--out", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data_path"));
    let o = partialnet(&["train", "--set", "data_path=/nonexistent/cifar", "--out", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablate_counts_every_grid_without_data() {
    let out = tempfile::tempdir().unwrap();
    let o = partialnet(&["ablate", "--set", "width=16", "--out", out.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for g in ["scope", "blocks", "mixer"] {
        assert!(out.path().join(format!("ablation_{g}.tsv")).exists());
    }
    assert_eq!(stdout(&o).matches("# grid").count(), 3);
}

#[test]
fn ablate_trains_each_row_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    write_cifar(dir.path(), 16, 8);
    let cfg = tiny_run_config(dir.path(), dir.path());
    let out = dir.path().join("abl");
    let o = partialnet(&[
        "ablate", "--config", cfg.to_str().unwrap(), "--set", "epochs=1", "--grid", "scope", "--seeds", "0,1", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let t = fs::read_to_string(out.join("ablation_scope.tsv")).unwrap();
    assert!(t.contains("seed0\tseed1"));
    assert_eq!(t.lines().count(), 4);
}

#[test]
fn bench_reports_throughput() {
    let out = tempfile::tempdir().unwrap();
    let o = partialnet(&["bench", "--set", "width=16", "--set", "input_size=64", "--reps", "2", "--out", out.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("img/s") && stdout(&o).contains("threads 1"));
}
