use std::fs;
use std::path::Path;
use std::process::Command;

use homlab::grid::GridFunction;
use homlab_harness::record::{Table, TaskRecord};
use homlab_harness::{emit_plot_data, parse_config, run, Experiment, RunRecord, ARTIFACT_VERSION};

const LAW: &str = r#"
experiment = "effective-law"

[environment]
kind = "scalar-linear"
spatial = "periodic"
values = [1.0, 4.0]

[geometry]
d = 1

[ladders]
cells = [4, 8]
cell_m = 16
p_max = 2.0
p_points = 5
"#;

const MOMENTS: &str = r#"
experiment = "spde-moments"

[geometry]
d = 1
L = 16
m = 4
dt = 0.05

[ladders]
t = [4.0, 1.0, 2.0]

[seeds]
base = 3
count = 4
"#;

fn homlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_homlab"))
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn missing_key_is_named_and_nothing_is_written() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "experiment = \"homogenize\"\n[environment]\nkind = \"identity\"\n[geometry]\nd = 1\nL = 2\ndt = 0.001\nT = 0.01\n[ladders]\nepsilon = [0.5]\n[seeds]\ncount = 2\n";
    let err = parse_config(text, None).unwrap_err();
    assert_eq!(err.keys(), vec!["geometry.m"]);

    let cfg = write(tmp.path(), "bad.toml", text);
    let out = tmp.path().join("out");
    let o = homlab().args(["homogenize", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("geometry.m"), "{stderr}");
    assert!(!out.exists());
}

#[test]
fn effective_law_run_writes_a_harmonic_mean_law() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "law.toml", LAW);
    let out = tmp.path().join("out");
    let o = homlab().args(["effective-law", "--workers", "1", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let law = homlab::corrector::EffectiveLaw::from_json(&fs::read_to_string(out.join("effective-law/law.json")).unwrap()).unwrap();
    for (p, v) in law.p_samples.iter().zip(&law.abar_values) {
        assert!((v[0] - 1.6 * p[0]).abs() <= 0.01 * p[0].abs() + 1e-12);
    }
    let rec = RunRecord::restore(&fs::read_to_string(out.join("record.json")).unwrap()).unwrap();
    assert!(rec.pass);
    assert_eq!(rec.config, parse_config(LAW, None).unwrap());
}

#[test]
fn verify_all_passes_on_the_identity_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "v.toml", "[geometry]\nd = 1\n");
    let out = tmp.path().join("out");
    let o = homlab().args(["verify-all", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let rec = RunRecord::restore(&fs::read_to_string(out.join("record.json")).unwrap()).unwrap();
    assert_eq!(rec.tasks.len(), 6);
    assert!(rec.tasks.iter().all(|t| t.pass));
}

#[test]
fn failing_experiment_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "experiment = \"corrector\"\n[environment]\nkind = \"scalar-linear\"\nvalues = [1.0, 4.0]\n[geometry]\nd = 1\nL = 4\nm = 8\n[ladders]\nlambda = [1e-1]\n[expect]\northogonality = 1e-300\n";
    let cfg = write(tmp.path(), "f.toml", text);
    let out = tmp.path().join("out");
    let o = homlab().args(["corrector", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let rec = RunRecord::restore(&fs::read_to_string(out.join("record.json")).unwrap()).unwrap();
    assert!(!rec.pass && rec.tasks[0].error.is_none());
}

#[test]
fn reruns_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = parse_config(MOMENTS, None);
    assert!(cfg.is_err(), "unsorted times must be rejected");
    let cfg = parse_config(&MOMENTS.replace("[4.0, 1.0, 2.0]", "[1.0, 2.0, 4.0]"), None).unwrap();
    let a = run(&cfg, &tmp.path().join("a")).unwrap();
    let b = run(&cfg, &tmp.path().join("b")).unwrap();
    assert_eq!(a.numeric_digest(), b.numeric_digest());
    let csv = |d: &str| fs::read(tmp.path().join(d).join("spde-moments/moments.csv")).unwrap();
    assert_eq!(csv("a"), csv("b"));
}

#[test]
fn seed_base_override_changes_the_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "m.toml", &MOMENTS.replace("[4.0, 1.0, 2.0]", "[1.0, 2.0]"));
    let out = tmp.path().join("out");
    let o = homlab().args(["spde-moments", "--seed-base", "11", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert!(o.status.success());
    let rec = RunRecord::restore(&fs::read_to_string(out.join("record.json")).unwrap()).unwrap();
    assert_eq!(rec.config.seeds.base, 11);
    assert_eq!(rec.seeds, vec![11, 12, 13, 14]);
    assert_eq!(rec.config_hash, rec.config.hash());
}

#[test]
fn config_round_trip_is_byte_identical() {
    for text in [LAW, &MOMENTS.replace("[4.0, 1.0, 2.0]", "[1.0, 2.0]")] {
        let c = parse_config(text, None).unwrap();
        let once = c.to_toml();
        let twice = parse_config(&once, None).unwrap().to_toml();
        assert_eq!(once, twice);
    }
}

#[test]
fn record_restore_and_version_check() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = parse_config(LAW, None).unwrap();
    let rec = run(&cfg, tmp.path()).unwrap();
    let text = rec.snapshot();
    let back = RunRecord::restore(&text).unwrap();
    assert_eq!(back, rec);
    assert_eq!(back.snapshot(), text);

    let old = text.replace(ARTIFACT_VERSION, "homlab-record/0");
    let err = RunRecord::restore(&old).unwrap_err().to_string();
    assert!(err.contains("homlab-record/0") && err.contains(ARTIFACT_VERSION), "{err}");
}

#[test]
fn grid_function_dumps_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let text = r#"
experiment = "corrector"
[environment]
kind = "scalar-linear"
spatial = "checkerboard"
c_min = 1.0
c_max = 4.0
seed = 5
[geometry]
d = 1
L = 8
m = 8
[ladders]
lambda = [1e-2]
"#;
    let cfg = parse_config(text, None).unwrap();
    run(&cfg, tmp.path()).unwrap();
    let bytes = fs::read(tmp.path().join("corrector/chi.bin")).unwrap();
    let g = GridFunction::decode(&bytes).unwrap();
    assert_eq!(g.encode(), bytes);
    assert!(g.values.iter().any(|v| *v != 0.0));
}

#[test]
fn a_failed_task_leaves_other_outputs_alone() {
    let tmp = tempfile::tempdir().unwrap();
    run(&parse_config(LAW, None).unwrap(), tmp.path()).unwrap();
    let law = fs::read(tmp.path().join("effective-law/law.json")).unwrap();
    let bad = r#"
experiment = "corrector"
[environment]
kind = "scalar-linear"
values = [1.0, 4.0]
[geometry]
d = 1
L = 4
m = 8
[ladders]
lambda = [1e-2]
R = [2.0, 64.0]
"#;
    let rec = run(&parse_config(bad, None).unwrap(), tmp.path()).unwrap();
    assert!(!rec.pass);
    assert!(rec.tasks[0].error.as_deref().unwrap().contains("ladders.R"));
    assert!(tmp.path().join("corrector/task.json").exists());
    assert_eq!(fs::read(tmp.path().join("effective-law/law.json")).unwrap(), law);
    assert!(!fs::read_dir(tmp.path()).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().contains("partial")));
}

#[test]
fn plot_data_for_moments_and_decorrelation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = parse_config(&MOMENTS.replace("[4.0, 1.0, 2.0]", "[1.0, 2.0, 4.0]"), None).unwrap();
    let mut rec = run(&cfg, &tmp.path().join("run")).unwrap();
    // reverse the rows to check that plot files are sorted by x
    for t in &mut rec.tasks[0].tables {
        t.rows.reverse();
    }
    let mut gap = TaskRecord::new("decorrelation");
    let mut t = Table::new("decorrelation", &["R", "gap", "stderr"]).plot("decorrelation", "R", "gap", Some("stderr"), Some("slope"));
    for r in [4.0, 1.0, 2.0] {
        t.push(&[r, 1.0 / r, 0.01]);
    }
    gap.tables.push(t);
    gap.metric("slope", -1.0);
    rec.tasks.push(gap);

    let m = emit_plot_data(&rec, &tmp.path().join("plots")).unwrap();
    let moments = m.entries.iter().find(|e| e.file == "spde-moments-moments.csv").unwrap();
    let text = fs::read_to_string(tmp.path().join("plots").join(&moments.file)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,EV2,stderr"));
    let ts: Vec<f64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(ts, vec![1.0, 2.0, 4.0]);

    let dec = m.entries.iter().find(|e| e.task == "decorrelation").unwrap();
    assert_eq!(dec.fitted_slope.map(|s| s.0), Some(-1.0));
    let text = fs::read_to_string(tmp.path().join("plots").join(&dec.file)).unwrap();
    assert!(text.starts_with("R,gap,stderr\n1,1,0.01\n"));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("plots/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["entries"].as_array().unwrap().len(), m.entries.len());
}

#[test]
fn empty_record_gives_an_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = parse_config(LAW, None).unwrap();
    let mut rec = run(&cfg, &tmp.path().join("run")).unwrap();
    rec.tasks.clear();
    let path = tmp.path().join("run/record.json");
    fs::write(&path, rec.snapshot()).unwrap();
    let o = homlab().args(["plot", "--record"]).arg(&path).arg("--out").arg(tmp.path().join("plots")).output().unwrap();
    assert!(o.status.success());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("plots/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 0);
    assert_eq!(Experiment::from_tag("plot"), None);
}
