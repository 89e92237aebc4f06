//! Acceptance suite. Prints one `[PASS]` or `[FAIL]` line per criterion.
//! Exits 0 unless `HOMLAB_ACCEPTANCE_STRICT=1` is set and something failed.

use std::path::PathBuf;
use std::time::Instant;

use homlab_harness::record::TaskRecord;
use homlab_harness::runner::compute;
use homlab_harness::{parse_config, run, ExperimentConfig};
use toml::{Table, Value};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Loads `configs/<name>.toml` and applies dotted-key overrides.
fn config(name: &str, overrides: &[(&str, Value)]) -> ExperimentConfig {
    let text = std::fs::read_to_string(configs().join(format!("{name}.toml"))).unwrap();
    let mut t: Table = text.parse().unwrap();
    for (key, v) in overrides {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().unwrap();
        let mut cur = &mut t;
        for p in parts {
            cur = cur.entry(p).or_insert_with(|| Value::Table(Table::new())).as_table_mut().unwrap();
        }
        cur.insert(last.into(), v.clone());
    }
    parse_config(&toml::to_string(&t).unwrap(), None).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn floats(xs: &[f64]) -> Value {
    Value::Array(xs.iter().map(|&x| Value::Float(x)).collect())
}

fn ints(xs: &[i64]) -> Value {
    Value::Array(xs.iter().map(|&x| Value::Integer(x)).collect())
}

fn tasks(cfg: &ExperimentConfig) -> Vec<TaskRecord> {
    compute(cfg).into_iter().map(|o| o.record).collect()
}

fn task(cfg: &ExperimentConfig) -> TaskRecord {
    let mut t = tasks(cfg);
    assert_eq!(t.len(), 1);
    t.remove(0)
}

fn find<'a>(ts: &'a [TaskRecord], name: &str) -> &'a TaskRecord {
    ts.iter().find(|t| t.name == name).unwrap()
}

fn m(t: &TaskRecord, key: &str) -> f64 {
    t.get(key).unwrap_or(f64::NAN)
}

struct Check {
    ok: bool,
    notes: Vec<String>,
}

impl Check {
    fn new() -> Self {
        Check { ok: true, notes: Vec::new() }
    }

    fn that(&mut self, ok: bool, note: String) {
        self.ok &= ok;
        self.notes.push(format!("{}{note}", if ok { "" } else { "!" }));
    }

    fn info(&mut self, note: String) {
        self.notes.push(format!("({note})"));
    }

    fn task_ok(&mut self, t: &TaskRecord) {
        if let Some(e) = &t.error {
            self.that(false, format!("{} errored: {e}", t.name));
        }
    }
}

fn harmonic_mean(values: &[f64]) -> f64 {
    values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>()
}

/// 1. The identity environment degenerates to the heat equation.
fn identity_degeneracy() -> Check {
    let mut c = Check::new();
    for d in [1, 2] {
        let cfg = config("verify-all", &[("geometry.d", Value::Integer(d))]);
        let ts = tasks(&cfg);
        for t in &ts {
            c.task_ok(t);
        }
        let g = m(find(&ts, "corrector"), "grad_chi_l2");
        let dev = m(find(&ts, "effective-law"), "identity_deviation");
        let h = find(&ts, "homogenize");
        let (homog, scheme) = (m(h, "homogenization_error"), m(h, "scheme_error"));
        c.that(g <= 1e-8, format!("d={d} |Dchi|={g:.1e}"));
        c.that(dev <= 1e-8, format!("d={d} |abar-p|={dev:.1e}"));
        c.that(homog <= 1e-8, format!("d={d} homog-minus-scheme={homog:.1e}"));
        c.that(scheme <= 1e-3, format!("d={d} scheme={scheme:.1e}"));
    }
    c
}

/// 2. Periodic {1,4} in d=1 gives the harmonic mean; flux orthogonality.
fn harmonic_mean_law() -> Check {
    let mut c = Check::new();
    let slope = harmonic_mean(&[1.0, 4.0]);
    let t = task(&config("effective-law", &[]));
    c.task_ok(&t);
    let law = t.table("law").unwrap();
    let (p, a) = (law.column("p_1").unwrap(), law.column("abar_1").unwrap());
    for target in [-2.0, -1.0, 1.0, 2.0] {
        let i = p.iter().position(|&x| x == target).unwrap();
        let rel = (a[i] - slope * target).abs() / (slope * target).abs();
        c.that(rel <= 0.01, format!("p={target} abar={:.6} rel={rel:.1e}", a[i]));
    }
    let t = task(&config("corrector", &[("geometry.L", Value::Integer(8)), ("ladders.R", floats(&[2.0, 4.0, 8.0]))]));
    c.task_ok(&t);
    let orth = m(&t, "orthogonality");
    c.that(orth.abs() <= 0.05, format!("orthogonality(L=8, lambda=1e-4)={orth:.2e}"));
    c
}

fn slope_check(c: &mut Check, label: &str, t: &TaskRecord, target: f64, tol: f64) {
    c.task_ok(t);
    let s = m(t, "slope");
    c.that((s - target).abs() <= tol, format!("{label} slope={s:.3}+-{:.3} target {target}+-{tol}", m(t, "slope_stderr")));
}

const TIMES: [f64; 7] = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0];

/// 3. Second-moment growth of the linear SPDE.
fn moment_growth() -> Check {
    let mut c = Check::new();
    let d1 = config("spde-moments", &[("seeds.count", Value::Integer(200)), ("ladders.t", floats(&TIMES))]);
    slope_check(&mut c, "d=1", &task(&d1), 0.5, 0.1);
    let d3 = config(
        "spde-moments",
        &[
            ("geometry.d", Value::Integer(3)),
            ("geometry.L", Value::Integer(20)),
            ("geometry.m", Value::Integer(3)),
            ("geometry.dt", Value::Float(0.1)),
            ("seeds.count", Value::Integer(200)),
            ("ladders.t", floats(&TIMES)),
            ("expect.slope", Value::Float(0.0)),
        ],
    );
    slope_check(&mut c, "d=3", &task(&d3), 0.0, 0.1);
    c
}

/// 4. Spatial decorrelation of the gradient.
fn decorrelation() -> Check {
    let mut c = Check::new();
    let d1 = config("decorrelation", &[("seeds.count", Value::Integer(400))]);
    let t = task(&d1);
    c.that(m(&t, "max_R2_over_t") <= 1.0, format!("d=1 R^2/t={}", m(&t, "max_R2_over_t")));
    slope_check(&mut c, "d=1", &t, -1.0, 0.5);
    let d2 = config(
        "decorrelation",
        &[
            ("geometry.d", Value::Integer(2)),
            ("geometry.L", Value::Integer(32)),
            ("geometry.m", Value::Integer(4)),
            ("geometry.T", Value::Float(32.0)),
            ("seeds.count", Value::Integer(100)),
            ("expect.slope", Value::Float(-2.0)),
        ],
    );
    let t = task(&d2);
    c.that(m(&t, "max_R2_over_t") <= 1.0, format!("d=2 R^2/t={}", m(&t, "max_R2_over_t")));
    slope_check(&mut c, "d=2", &t, -2.0, 0.5);
    c
}

/// 5. Attractor convergence rate in d=1.
fn attractor_rate() -> Check {
    let mut c = Check::new();
    let d: f64 = 1.0;
    let target = -(1.0f64).min(d / 4.0);
    let t = task(&config("attractor", &[("seeds.count", Value::Integer(200)), ("expect.slope", Value::Float(target))]));
    slope_check(&mut c, "d=1", &t, target, 0.15);
    c
}

/// 6. Sublinearity of the corrector.
fn sublinearity() -> Check {
    let mut c = Check::new();
    let t = task(&config("corrector", &[]));
    c.task_ok(&t);
    let s = m(&t, "sublinearity_slope");
    c.that((s + 2.0).abs() <= 0.3, format!("periodic slope={s:.3}"));
    let random = config(
        "corrector",
        &[
            ("environment.spatial", Value::String("checkerboard".into())),
            ("environment.c_min", Value::Float(1.0)),
            ("environment.c_max", Value::Float(4.0)),
            ("environment.seed", Value::Integer(3)),
            ("expect.orthogonality", Value::Float(1.0)),
        ],
    );
    let t = task(&random);
    c.task_ok(&t);
    let col = t.table("sublinearity").unwrap().column("space_time").unwrap();
    let dec = col.windows(2).all(|w| w[1] < w[0]);
    c.that(dec, format!("random checkerboard R=4,8,16: {:.3e} {:.3e} {:.3e}", col[0], col[1], col[2]));
    c
}

fn ratio_report(c: &mut Check, label: &str, t: &TaskRecord, max_ratio: f64) {
    c.task_ok(t);
    for k in 1.. {
        let Some(r) = t.get(&format!("ratio_{k}")) else { break };
        c.that(r <= max_ratio, format!("{label} ratio_{k}={r:.3}"));
    }
}

/// 7. Quantitative homogenization on periodic and random environments.
fn homogenization() -> Check {
    let mut c = Check::new();
    let random = task(&config("homogenize", &[]));
    ratio_report(&mut c, "random", &random, 0.8);
    let f = m(&random, "per_seed_fraction");
    c.that(f >= 0.9, format!("random seeds passing={f:.2}"));
    let periodic = config(
        "homogenize",
        &[
            ("environment.spatial", Value::String("periodic".into())),
            ("environment.values", floats(&[1.0, 4.0])),
            ("environment.temporal", Value::String("static".into())),
            ("ladders.cells", ints(&[4, 8])),
            ("ladders.cell_m", Value::Integer(16)),
            ("ladders.lambda", floats(&[1e-1, 1e-2, 1e-3, 1e-4])),
        ],
    );
    let periodic = task(&periodic);
    ratio_report(&mut c, "periodic", &periodic, 0.8);
    let f = m(&periodic, "per_seed_fraction");
    c.that(f >= 0.9, format!("periodic seeds passing={f:.2}"));
    c
}

/// 8. Funaki-Spohn lattice and the continuous gradient model.
fn gradient_models() -> Check {
    let mut c = Check::new();
    let t = task(&config("fs-lattice", &[]));
    c.task_ok(&t);
    let bal = m(&t, "drift_balance");
    c.that(bal <= 1e-12, format!("drift site-sum/scale={bal:.1e}"));
    let e = m(&t, "final_error");
    let errors = t.table("errors").unwrap();
    let i = errors.rows.len() - 1;
    let se = errors.column("stderr").unwrap()[i];
    c.that(e <= 0.05, format!("lattice L2 at eps=1/64: {e:.4}+-{se:.4}"));
    c.info(format!("replica-mean field error {:.4}", errors.column("mean_field_error").unwrap()[i]));
    let t = task(&config("fs-continuous", &[]));
    ratio_report(&mut c, "continuous", &t, 0.8);
    c
}

/// 9. Invariants and bit-exact replay.
fn invariants() -> Check {
    let mut c = Check::new();
    let ts = tasks(&config("verify-all", &[]));
    for t in &ts {
        c.task_ok(t);
    }
    let dual = m(find(&ts, "duality"), "relative_defect");
    c.that(dual <= 1e-12, format!("duality defect={dual:.1e}"));
    let se = find(&ts, "solver-energy");
    c.that(m(se, "energy_increases") == 0.0 && m(se, "iterations") > 0.0, format!("residual increases={} over {} iterations", m(se, "energy_increases"), m(se, "iterations")));
    let law = task(&config("effective-law", &[]));
    let mi = m(&law, "min_inner");
    c.that(mi >= -1e-8, format!("min pairwise monotonicity={mi:.3e}"));
    c.that(find(&ts, "determinism").pass, "in-process replay".into());

    let pinned = config("spde-moments", &[("seeds.count", Value::Integer(8)), ("ladders.t", floats(&[1.0, 2.0, 4.0]))]);
    let tmp = tempfile::tempdir().unwrap();
    let a = run(&pinned, &tmp.path().join("a")).unwrap();
    let b = run(&pinned, &tmp.path().join("b")).unwrap();
    let same = a.numeric_digest() == b.numeric_digest();
    let csv = |r: &str| std::fs::read(tmp.path().join(r).join("spde-moments/moments.csv")).unwrap();
    c.that(same && csv("a") == csv("b"), format!("pinned replay digest {}", &a.numeric_digest()[..12]));
    c
}

fn main() {
    // libtest flags such as --nocapture are passed through and ignored here
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Check); 9] = [
        ("identity degeneracy", identity_degeneracy),
        ("periodic effective law", harmonic_mean_law),
        ("moment growth", moment_growth),
        ("decorrelation", decorrelation),
        ("attractor rate", attractor_rate),
        ("corrector sublinearity", sublinearity),
        ("homogenization rate", homogenization),
        ("gradient models", gradient_models),
        ("invariants and replay", invariants),
    ];
    let mut failed = Vec::new();
    let mut ran = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|x| x == &n.to_string()) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let c = f();
        let tag = if c.ok { "PASS" } else { "FAIL" };
        println!("[{tag}] criterion {n}: {name} ({:.1}s) {}", start.elapsed().as_secs_f64(), c.notes.join("; "));
        if !c.ok {
            failed.push(n);
        }
    }
    println!("acceptance: {} of {ran} criteria passed; failed: {failed:?}", ran - failed.len());
    if std::env::var("HOMLAB_ACCEPTANCE_STRICT").as_deref() == Ok("1") && !failed.is_empty() {
        std::process::exit(1);
    }
}
