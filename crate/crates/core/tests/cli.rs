use nrx::cli::run_with;
use std::path::Path;

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name).display().to_string()
}

fn nrx(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("nrx").chain(args.iter().copied());
    let code = run_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

const TINY: &str = "\
# small enough for a debug build
facts = 30
d_w = 6
d_p = 2
d_b = 6
max_dist = 20
n_filters = 2
window = 3
heads = 2
re_epochs = 2
sde_passes = 1
rounds = 1
batch_size = 16
lr = 0.3
sde_lr_gamma = 0.1
";

fn tiny_workspace() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    let (code, _, err) = nrx(&["generate", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    (dir, cfg.display().to_string())
}

#[test]
fn weak_labeling_reproduces_the_table() {
    let (code, out, _) = nrx(&[
        "label",
        "--mode",
        "weak",
        "--facts",
        &fixture("table2_facts.jsonl"),
        "--corpus",
        &fixture("table2_corpus.jsonl"),
    ]);
    assert_eq!(code, 0);
    assert_eq!(
        out.trim(),
        r#"{"fact_index":0,"mode":"weak","main":[["curie",0],["curie",1]],"supplementary":[["curie",2]]}"#
    );
}

#[test]
fn train_eval_inspect_round_trip() {
    let (dir, cfg) = tiny_workspace();
    let d = dir.path();
    let groups = d.join("data/groups.jsonl").display().to_string();
    let run = d.join("run").display().to_string();
    let (code, out, err) = nrx(&["train", "--config", &cfg, "--data", &groups, "--out", &run]);
    assert_eq!(code, 0, "{err}");
    let hash = out.split_whitespace().nth(1).unwrap().trim_end_matches(':').to_string();
    assert!(d.join(format!("run/re-{hash}.ckpt")).exists());
    assert!(d.join(format!("run/sde-{hash}.ckpt")).exists());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["config_hash"], hash.as_str());
    assert_eq!(report["report"]["config"]["facts"], "30");
    assert_eq!(report["report"]["alpha_beta"][0], serde_json::json!([0.5, 0.5]));

    let (code, out, err) = nrx(&["eval", "--config", &cfg, "--data", &groups, "--ckpt", &run]);
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("subset\tsamples\taccuracy\nall\t"), "{out}");
    assert!(out.contains("\nclean\t") && out.contains("\nnoisy\t"));

    let insp = d.join("insp").display().to_string();
    let (code, _, err) = nrx(&["inspect", "--config", &cfg, "--data", &groups, "--ckpt", &run, "--out", &insp]);
    assert_eq!(code, 0, "{err}");
    let csv = std::fs::read_to_string(d.join(format!("insp/histogram-{hash}.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 11);
    let ab = std::fs::read_to_string(d.join(format!("insp/alpha_beta-{hash}.csv"))).unwrap();
    assert!(ab.starts_with("update,alpha,beta\n0,0.5,0.5\n"), "{ab}");
    let sel = std::fs::read_to_string(d.join(format!("insp/selection-{hash}.jsonl"))).unwrap();
    assert!(sel.lines().count() >= 30);
}

#[test]
fn identical_invocations_write_identical_files() {
    let (dir, cfg) = tiny_workspace();
    let groups = dir.path().join("data/groups.jsonl").display().to_string();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let (code, _, err) = nrx(&["train", "--config", &cfg, "--data", &groups, "--out", out.to_str().unwrap()]);
        assert_eq!(code, 0, "{err}");
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        outputs.push(files);
    }
    assert_eq!(outputs[0].len(), 3);
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn bad_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "lr = 0.1\nbogus = 3\n").unwrap();
    let groups = dir.path().join("groups.jsonl");
    std::fs::write(&groups, "{not json}\n").unwrap();
    let (code, _, err) = nrx(&["train", "--config", cfg.to_str().unwrap(), "--data", "x", "--out", "y"]);
    assert_eq!(code, 1);
    assert!(err.contains("bad.cfg:2") && err.contains("bogus"), "{err}");

    let (code, _, err) = nrx(&["label", "--mode", "weak", "--facts", "missing.jsonl", "--corpus", "c.jsonl"]);
    assert_eq!(code, 1);
    assert!(err.contains("missing.jsonl"), "{err}");

    std::fs::write(dir.path().join("facts.jsonl"), "").unwrap();
    std::fs::write(dir.path().join("corpus.jsonl"), "").unwrap();
    let (code, _, err) = nrx(&["train", "--data", groups.to_str().unwrap(), "--out", "y"]);
    assert_eq!(code, 1);
    assert!(err.contains("groups.jsonl:1"), "{err}");

    assert_eq!(nrx(&["frobnicate"]).0, 1);
    assert_eq!(nrx(&["--help"]).0, 0);
}

#[test]
fn eval_without_matching_checkpoint_is_rejected() {
    let (dir, cfg) = tiny_workspace();
    let groups = dir.path().join("data/groups.jsonl").display().to_string();
    let (code, _, err) = nrx(&["eval", "--config", &cfg, "--data", &groups, "--ckpt", dir.path().to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("missing checkpoint"), "{err}");
}

#[test]
fn gradcheck_passes() {
    let (code, out, _) = nrx(&["gradcheck", "--seed", "10"]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(out.lines().count(), 10);
    assert!(out.contains("supplementary policy") && out.contains("all layers pass"));
}

#[test]
fn shipped_desk_config_matches_the_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/desk.cfg");
    assert_eq!(nrx::config::RunConfig::read(&path).unwrap(), nrx::config::RunConfig::desk());
}
