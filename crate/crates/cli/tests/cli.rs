use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use batfled::eval::simulation_hyper;
use batfled::simulate::generate;
use batfled::{load_checkpoint, predict_cold, ColdQuery, CoreKind, Decomposition, ModeQuery, ModelState, SimConfig};

fn batfled(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_batfled")).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) {
    let out = batfled(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

const SMALL_SIM: &str = "
[simulate]
core_kind = \"faces2d\"
n_examples = [8, 7, 6]
n_features = [10, 9, 8]
n_causal = [3, 3, 3]
latent_dim = [2, 2, 2]
holdout = 1
";

const SMALL_MODEL: &str = "
[model]
latent_dim = [2, 2, 2]
rank = 3
";

/// Simulates the small dataset into `dir` and returns a config pointing at it.
fn small_dataset(dir: &Path, extra: &str) -> PathBuf {
    let cfg = write(dir, "sim.toml", SMALL_SIM);
    run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "5", "--out-dir", dir.to_str().unwrap()]);
    let text = format!(
        "{SMALL_MODEL}
[data]
features = [\"features_m1.tsv\", \"features_m2.tsv\", \"features_m3.tsv\"]
responses = \"responses.tsv\"
{extra}"
    );
    write(dir, "run.toml", &text)
}

fn small_sim_config() -> SimConfig {
    SimConfig {
        n_examples: [8, 7, 6],
        n_features: [10, 9, 8],
        n_causal: [3; 3],
        latent_dim: [2; 3],
        ..SimConfig::with_kind(CoreKind::Faces2D, 5)
    }
}

#[test]
fn default_simulation_has_the_protocol_sizes_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        run_ok(&["simulate", "--seed", "3", "--out-dir", d.path().to_str().unwrap()]);
    }
    for m in 1..=3 {
        let f = read(a.path().join(format!("features_m{m}.tsv")));
        let lines: Vec<&str> = f.lines().collect();
        assert_eq!(lines.len(), 31);
        assert_eq!(lines[0].split('\t').count(), 101);
    }
    assert_eq!(read(a.path().join("responses.tsv")).lines().count(), 27_001);
    for name in ["features_m1.tsv", "responses.tsv", "truth.json", "split.json"] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
    let split: serde_json::Value = serde_json::from_str(&read(a.path().join("split.json"))).unwrap();
    assert_eq!(split["train"][0].as_array().unwrap().len(), 28);
    assert_eq!(split["warm"].as_array().unwrap().len(), 220);
}

#[test]
fn config_errors_exit_with_code_2_and_name_the_field() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "bad.toml", "[simulate]\ncore_kind = \"cube\"\n");
    let out = batfled(&["simulate", "--config", cfg.to_str().unwrap(), "--out-dir", d.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("simulate.core_kind"));

    let cfg = write(d.path(), "typo.toml", "[train]\nsweepz = 3\n");
    let out = batfled(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sweepz"));
}

#[test]
fn missing_inputs_exit_with_code_4() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(
        d.path(),
        "run.toml",
        "[data]\nfeatures = [\"a.tsv\", \"b.tsv\", \"c.tsv\"]\nresponses = \"y.tsv\"\n",
    );
    let out = batfled(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", d.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn numerical_abort_exits_with_code_3() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_dataset(
        d.path(),
        "[train]\nsweeps = 3\nstandardize_responses = false\n",
    );
    // Responses near the top of the f64 range overflow once squared.
    let y = read(d.path().join("responses.tsv"));
    let huge: String = y
        .lines()
        .enumerate()
        .map(|(n, l)| {
            if n == 0 {
                format!("{l}\n")
            } else {
                let (ids, _) = l.rsplit_once('\t').unwrap();
                format!("{ids}\t1e300\n")
            }
        })
        .collect();
    write(d.path(), "responses.tsv", &huge);
    let out = batfled(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", d.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn zero_sweeps_saves_the_initial_state() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_dataset(d.path(), "[train]\nsweeps = 0\n");
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--seed", "9", "--out-dir", d.path().to_str().unwrap()]);
    let saved = load_checkpoint(&d.path().join("model.ckpt")).unwrap();
    let mut hyper = simulation_hyper(Decomposition::Tucker, 1e-5, 1e5).with_seed(9);
    for m in &mut hyper.modes {
        m.latent_dim = 2;
    }
    let ds = generate(&small_sim_config()).unwrap();
    let init = ModelState::init_random(hyper, ds.features.clone()).unwrap();
    assert_eq!(saved, init);
    assert_eq!(read(d.path().join("trace.tsv")).lines().count(), 1);
}

#[test]
fn trace_rows_follow_elbo_every_and_resume_matches_one_run() {
    let d = tempfile::tempdir().unwrap();
    let long_dir = d.path().join("long");
    let cfg = small_dataset(d.path(), "[train]\nsweeps = 6\nelbo_every = 2\n");
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", long_dir.to_str().unwrap()]);
    let trace = read(long_dir.join("trace.tsv"));
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], "sweep\telbo\trmse\tms");
    assert_eq!(lines.len(), 1 + 3);
    assert!(lines[1].starts_with("2\t"));

    let first = d.path().join("first");
    let cfg4 = write(
        d.path(),
        "four.toml",
        &read(&cfg).replace("sweeps = 6", "sweeps = 4"),
    );
    run_ok(&["train", "--config", cfg4.to_str().unwrap(), "--out-dir", first.to_str().unwrap()]);
    let resume = write(
        d.path(),
        "resume.toml",
        &read(&cfg).replace("sweeps = 6", "sweeps = 2\nresume_from = \"first/model.ckpt\""),
    );
    let second = d.path().join("second");
    run_ok(&["train", "--config", resume.to_str().unwrap(), "--out-dir", second.to_str().unwrap()]);
    assert_eq!(
        std::fs::read(long_dir.join("model.ckpt")).unwrap(),
        std::fs::read(second.join("model.ckpt")).unwrap()
    );
}

fn predictions(p: &Path) -> Vec<(String, String, String, f64)> {
    read(p)
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[0].into(), f[1].into(), f[2].into(), f[3].parse().unwrap())
        })
        .collect()
}

#[test]
fn predictions_pass_library_values_through() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_dataset(
        d.path(),
        "split = \"split.json\"\n[train]\nsweeps = 5\n[predict]\ncheckpoint = \"model.ckpt\"\n",
    );
    let dir = d.path().to_str().unwrap();
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", dir]);
    run_ok(&["predict", "--config", cfg.to_str().unwrap(), "--out-dir", dir]);
    let state = load_checkpoint(&d.path().join("model.ckpt")).unwrap();
    let warm = predictions(&d.path().join("predictions.tsv"));
    assert_eq!(warm.len(), 7 * 6 * 5);
    let lib = predict_cold(&state, &ColdQuery::all_known()).unwrap();
    for (row, v) in warm.iter().zip(lib.as_slice()) {
        assert_eq!(row.3.to_bits(), v.to_bits());
    }

    // One new example per mode: a single-cell prediction.
    let ds = generate(&small_sim_config()).unwrap();
    let split: serde_json::Value = serde_json::from_str(&read(d.path().join("split.json"))).unwrap();
    let mut query = read(&cfg);
    let mut feats = Vec::new();
    for m in 0..3 {
        let id = split["test"][m][0].as_str().unwrap();
        let idx = ds.features[m].row_ids.iter().position(|r| r == id).unwrap();
        let one = ds.features[m].select_rows(&[idx]);
        let text = read(d.path().join(format!("features_m{}.tsv", m + 1)));
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        let row = lines.find(|l| l.split('\t').next() == Some(id)).unwrap();
        write(d.path(), &format!("new_m{}.tsv", m + 1), &format!("{header}\n{row}\n"));
        query.push_str(&format!("mode{} = \"new_m{}.tsv\"\n", m + 1, m + 1));
        feats.push(one);
    }
    let qcfg = write(d.path(), "query.toml", &query);
    let qdir = d.path().join("cold");
    run_ok(&["predict", "--config", qcfg.to_str().unwrap(), "--out-dir", qdir.to_str().unwrap()]);
    let cold = predictions(&qdir.join("predictions.tsv"));
    assert_eq!(cold.len(), 1);
    let q = ColdQuery {
        modes: [0, 1, 2].map(|m| ModeQuery::New(feats[m].clone())),
    };
    assert_eq!(cold[0].3.to_bits(), predict_cold(&state, &q).unwrap().as_slice()[0].to_bits());
}

#[test]
fn schema_mismatch_lists_the_columns() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_dataset(d.path(), "[train]\nsweeps = 1\n[predict]\ncheckpoint = \"model.ckpt\"\nmode2 = \"bad.tsv\"\n");
    let dir = d.path().to_str().unwrap();
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", dir]);
    let text = read(d.path().join("features_m2.tsv"));
    write(d.path(), "bad.tsv", &text.replacen("d_f0", "d_zz", 1));
    let out = batfled(&["predict", "--config", cfg.to_str().unwrap(), "--out-dir", dir]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("d_f0") && err.contains("d_zz"), "{err}");
}

fn report_rows(p: &Path) -> Vec<Vec<String>> {
    read(p).lines().skip(1).map(|l| l.split('\t').map(str::to_string).collect()).collect()
}

#[test]
fn mean_baseline_benchmark_has_one_row_per_replicate_and_a_summary() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(
        d.path(),
        "b.toml",
        "[benchmark]\nreplicates = 3\ncore_kinds = [\"edges1d\"]\nmethods = [\"mean\"]\n",
    );
    run_ok(&["benchmark", "--config", cfg.to_str().unwrap(), "--out-dir", d.path().to_str().unwrap()]);
    let header = read(d.path().join("edges1d_mean_nrmse.tsv")).lines().next().unwrap().to_string();
    assert_eq!(
        header,
        "replicate\tstatus\ttrain\twarm\tm1\tm2\tm3\tm1&2\tm1&3\tm2&3\tm1,2&3\tauroc_m1\tauroc_m2\tauroc_m3"
    );
    let rows = report_rows(&d.path().join("edges1d_mean_nrmse.tsv"));
    assert_eq!(rows.len(), 3 + 1);
    assert_eq!(rows[3][0], "mean");
    for c in 2..11 {
        let mean: f64 = rows[3][c].parse().unwrap();
        let direct = rows[..3].iter().map(|r| r[c].parse::<f64>().unwrap()).sum::<f64>() / 3.0;
        assert!((mean - direct).abs() <= 1e-12);
    }
    assert_eq!(rows[0][11], "NA");
}

#[test]
fn model_benchmark_is_reproducible_across_thread_counts() {
    let base = format!(
        "{SMALL_SIM}{SMALL_MODEL}[train]\nsweeps = 3\n[benchmark]\nreplicates = 2\ncore_kinds = [\"full3d\"]\nmethods = [\"tucker\", \"cp\"]\n"
    );
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "b.toml", &base);
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    run_ok(&["benchmark", "--config", cfg.to_str().unwrap(), "--threads", "1", "--out-dir", a.to_str().unwrap()]);
    run_ok(&["benchmark", "--config", cfg.to_str().unwrap(), "--threads", "3", "--out-dir", b.to_str().unwrap()]);
    for name in ["full3d_tucker_nrmse.tsv", "full3d_cp_pearson.tsv", "summary.tsv"] {
        assert_eq!(read(a.join(name)), read(b.join(name)), "{name}");
    }
    let rows = report_rows(&a.join("full3d_tucker_nrmse.tsv"));
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().take(2).all(|r| r[1] == "ok"));
    assert!(rows[0][11].parse::<f64>().is_ok(), "auroc is reported for simulated data");
}

#[test]
fn evaluate_scores_each_fold() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_dataset(
        d.path(),
        "truth = \"truth.json\"\n[train]\nsweeps = 3\n[evaluate]\nfolds = 3\nholdout = [1, 1, 1]\n",
    );
    run_ok(&["evaluate", "--config", cfg.to_str().unwrap(), "--out-dir", d.path().to_str().unwrap()]);
    let rows = report_rows(&d.path().join("report_nrmse.tsv"));
    assert_eq!(rows.len(), 3 + 1);
    assert!(rows[..3].iter().all(|r| r[1] == "ok"));
    let summary = read(d.path().join("summary.tsv"));
    assert_eq!(summary.lines().count(), 1 + 4);
}
