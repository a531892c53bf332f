use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dualimit(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualimit"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, pre, st, ft) = (
        tmp.path().join("data"),
        tmp.path().join("pre"),
        tmp.path().join("stitch"),
        tmp.path().join("finetune"),
    );
    assert!(dualimit(&data, &["gen-data"]).status.success());
    for f in ["mdp.json", "expert.jsonl", "union.jsonl", "config.resolved"] {
        assert!(data.join(f).is_file(), "{f}");
    }

    let o = dualimit(
        &pre,
        &[
            "pretrain",
            "--data",
            path(&data.join("union.jsonl")),
            "--mdp",
            path(&data.join("mdp.json")),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = dualimit(
        &st,
        &[
            "stitch",
            "--discriminator",
            path(&pre.join("discriminator.json")),
            "--duals",
            path(&pre.join("duals.json")),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let o = dualimit(
        &ft,
        &[
            "--set",
            "gail.episodes=16",
            "finetune",
            "--mdp",
            path(&data.join("mdp.json")),
            "--expert",
            path(&data.join("expert.jsonl")),
            "--policy",
            path(&pre.join("policy.json")),
            "--disc-init",
            "stitched",
            "--stitched",
            path(&st.join("stitched.json")),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ft.join("summary.json")).unwrap()).unwrap();
    assert!(summary["final_return"].as_f64().unwrap().is_finite());
    assert!(fs::read_to_string(ft.join("config.resolved"))
        .unwrap()
        .contains("gail.episodes = 16"));

    let rep = tmp.path().join("report");
    let o = dualimit(&rep, &["report", "--curve", path(&ft.join("curve.csv"))]);
    assert!(o.status.success(), "{}", stderr(&o));

    let ev = tmp.path().join("eval");
    let o = dualimit(
        &ev,
        &[
            "eval",
            "--mdp",
            path(&data.join("mdp.json")),
            "--policy",
            path(&ft.join("policy.json")),
            "--expert",
            path(&data.join("expert.jsonl")),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn missing_dataset_names_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dualimit(
        tmp.path(),
        &["pretrain", "--data", path(&tmp.path().join("absent.jsonl"))],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--data"), "{}", stderr(&o));
}

#[test]
fn finetune_requires_an_explicit_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dualimit(
        tmp.path(),
        &[
            "finetune", "--mdp", "m.json", "--expert", "e.jsonl", "--policy", "p.json",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--disc-init"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dualimit(tmp.path(), &["--set", "offline.alpah=2", "gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("offline.alpah"), "{}", stderr(&o));
}

#[test]
fn overflowing_reward_exits_with_numerical_code() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("big.jsonl");
    fs::write(
        &data,
        "{\"s\":0,\"a\":0,\"sn\":0,\"start\":true,\"src\":\"s\",\"r\":1e6}\n{\"s\":0,\"a\":1,\"sn\":0,\"start\":false,\"src\":\"s\",\"r\":0}\n",
    )
    .unwrap();
    let o = dualimit(
        tmp.path(),
        &["--set", "offrl.alpha=0.001", "offrl", "--data", path(&data)],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn oracle_check_passes_on_generated_fixtures() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fixtures");
    assert!(dualimit(&fx, &["gen-fixtures"]).status.success());
    let one = tmp.path().join("one");
    fs::create_dir_all(&one).unwrap();
    let first = fs::read_dir(&fx)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .min()
        .unwrap();
    fs::copy(&first, one.join(first.file_name().unwrap())).unwrap();
    let out = tmp.path().join("check");
    let o = dualimit(&out, &["oracle-check", "--fixtures", path(&one)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(out.join("oracle_report.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 6);
}

#[test]
fn seed_propagates_to_derived_keys() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(dualimit(tmp.path(), &["--set", "seed=7", "gen-data"]).status.success());
    let resolved = fs::read_to_string(tmp.path().join("config.resolved")).unwrap();
    assert!(resolved.lines().any(|l| l == "seed = 7"), "{resolved}");
}
