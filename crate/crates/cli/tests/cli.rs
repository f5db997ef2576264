use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
image_size = 16
patch_size = 4
dims = [8, 16]
depths = [1, 1]
heads = [2, 2]

[model.acp]
n_lpu = 1

[model.cat]
num_concepts = 4

[train]
seed = 0
steps = 4
batch_size = 4
eval_every = 2
"#;

const TINY_DATA: &str = "\n[data]\nn_train = 12\nn_test = 4\nsize = 16\n";

fn eivit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eivit")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn bad_configs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nseed = 0\nunknown_key = 1\n");
    let o = eivit(&["count-params", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let o = eivit(&["generate-data"]);
    assert_eq!(o.status.code(), Some(2));
    let o = eivit(&["gradcheck", "--filter", "no_such_check"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergent_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}lr = 1e30\n{TINY_DATA}"));
    let out = dir.path().join("run");
    let o = eivit(&["train", "--config", &cfg, "--precision", "64", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_filter_reports_each_seed() {
    let o = eivit(&["gradcheck", "--filter", "softmax", "--seeds", "0,1"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(text.lines().next(), Some("check,seed,max_rel_error,tolerance,status"));
    assert!(!rows.is_empty() && rows.len().is_multiple_of(2));
    assert!(rows.iter().all(|r| r.contains("softmax") && r.ends_with(",ok")));
}

#[test]
fn count_params_lists_three_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}{TINY_DATA}"));
    let o = eivit(&["count-params", "--config", &cfg]);
    assert!(o.status.success());
    let text = stdout(&o);
    let names: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["enhanced", "baseline", "baseline-matched"]);
}

#[test]
fn generate_train_evaluate_dump_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let path = |s: &str| d.join(s).to_str().unwrap().to_owned();
    let data = d.join("data");
    let gen = write_config(d, &format!("{TINY}{TINY_DATA}"));
    let o = eivit(&["generate-data", "--config", &gen, "--out", &path("data"), "--seed", "3"]);
    assert!(o.status.success());
    assert!(data.read_dir().unwrap().next().is_some());

    let cfg = write_config(d, &format!("{TINY}\n[data]\ndir = {:?}\n", data.to_str().unwrap()));

    let o = eivit(&["train", "--config", &cfg, "--precision", "64", "--out", &path("run")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(d.join("run/config.toml").exists());

    let again = path("again");
    assert!(eivit(&["train", "--config", &cfg, "--precision", "64", "--out", &again]).status.success());
    assert_eq!(fs::read(d.join("again/metrics.csv")).unwrap(), metrics.as_bytes());

    let ckpt = path("run/checkpoint.eiv");
    let o = eivit(&["evaluate", "--checkpoint", &ckpt]);
    assert!(o.status.success());
    let eval = stdout(&o);
    assert_eq!(eval.lines().nth(1).unwrap().split(',').skip(2).collect::<Vec<_>>(),
        metrics.lines().last().unwrap().split(',').skip(2).collect::<Vec<_>>());

    let o = eivit(&["dump", "--checkpoint", &ckpt, "--samples", "3", "--out", &path("dump")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dump = path("dump/dump.eiv");
    assert!(eivit(&["analyze-pca", "--dump", &dump, "--out", &path("pca")]).status.success());
    assert!(d.join("pca/pca_explained.csv").exists());
    assert!(eivit(&["analyze-attention", "--dump", &dump, "--out", &path("att")]).status.success());
    let o = eivit(&["analyze-cka", "--dump-a", &dump, "--dump-b", &dump, "--variant", "linear", "--out", &path("cka")]);
    assert!(o.status.success());
    assert!(d.join("cka/cka_linear.csv").exists());

    let o = eivit(&["evaluate", "--checkpoint", &path("run/metrics.csv")]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablation_isolation_writes_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}{TINY_DATA}").replace("steps = 4", "steps = 1"));
    let out = dir.path().join("abl");
    let o = eivit(&["ablate-isolation", "--config", &cfg, "--precision", "64", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let csv = fs::read_to_string(out.join("ablation_isolation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(stdout(&o), csv);
}
