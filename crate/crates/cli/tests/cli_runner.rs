use std::path::Path;
use std::process::Command;

use clockbarrier_cli::config::RunConfig;
use clockbarrier_cli::output::{sig10, Table};
use clockbarrier_cli::row;

const BIN: &str = env!("CARGO_BIN_EXE_clockbarrier");

const BASE: &str = r#"
seed = 11

[market]
spot = 100.0
rate = 0.03

[clock]
family = "cir"
kappa = 0.6
theta = 0.2
xi = 0.4
v0 = 0.18

[mc]
n_paths = 4000
n_steps_per_year = 260
"#;

fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN).args(args).env_remove("CLOCKBARRIER_THREADS").output().unwrap();
    (out.status.code().unwrap(), String::from_utf8(out.stdout).unwrap(), String::from_utf8(out.stderr).unwrap())
}

fn with_contract(extra: &str) -> String {
    format!("{BASE}\n{extra}")
}

const DOC: &str = r#"
[[contracts]]
kind = "DOC"
strike = 100.0
lower = 70.0
maturity = 1.0
"#;

#[test]
fn price_writes_csv_and_logs_digest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &with_contract(DOC));
    let (code, out, err) = run(&["price", cfg.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let mut lines = out.lines();
    assert_eq!(lines.next().unwrap(), "contract,kind,strike,lower,upper,maturity,price");
    let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
    let p: f64 = fields[6].parse().unwrap();
    assert!((p - 17.0450).abs() < 1e-3);
    assert!(err.contains("config-digest=") && err.contains("seed=11"));
}

#[test]
fn geometry_error_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = "[[contracts]]\nkind = \"UOP\"\nstrike = 100.0\nupper = 90.0\nmaturity = 1.0\n";
    let cfg = write(dir.path(), "c.toml", &with_contract(bad));
    let (code, out, err) = run(&["price", cfg.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(out.is_empty());
    assert!(err.contains("error:") && err.to_lowercase().contains("barrier"), "{err}");
    assert!(!err.contains("panicked"));
}

#[test]
fn config_errors_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write(dir.path(), "u.toml", &format!("{}\nsurprise = 1\n", with_contract(DOC)));
    assert_eq!(run(&["price", unknown.to_str().unwrap()]).0, 1);
    let nested = with_contract(DOC).replace("rate = 0.03", "rate = 0.03\nrepo = 0.01");
    let nested = write(dir.path(), "n.toml", &nested);
    assert_eq!(run(&["price", nested.to_str().unwrap()]).0, 1);
    let no_contracts = write(dir.path(), "e.toml", BASE);
    let (code, _, err) = run(&["price", no_contracts.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("contracts"));
    assert_eq!(run(&["price", "/nonexistent/config.toml"]).0, 1);
    assert_eq!(run(&["no-such-command"]).0, 1);
    let bad_clock = with_contract(DOC).replace("xi = 0.4", "xi = -0.4");
    let bad_clock = write(dir.path(), "x.toml", &bad_clock);
    assert_eq!(run(&["price", bad_clock.to_str().unwrap()]).0, 1);
}

#[test]
fn invalid_table_id_exits_with_validation_code() {
    let (code, out, err) = run(&["repro-table", "6.99"]);
    assert_eq!(code, 1);
    assert!(out.is_empty());
    assert!(err.contains("6.99"));
}

#[test]
fn same_config_and_seed_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &with_contract(DOC));
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    assert_eq!(run(&["mc-validate", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]).0, 0);
    let out = Command::new(BIN)
        .args(["mc-validate", cfg.to_str().unwrap(), "--out", b.to_str().unwrap()])
        .env("CLOCKBARRIER_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = dir.path().join("c.csv");
    assert_eq!(run(&["mc-validate", cfg.to_str().unwrap(), "--seed", "12", "--out", c.to_str().unwrap()]).0, 0);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn bad_thread_setting_is_rejected() {
    let out = Command::new(BIN).args(["repro-table", "6.2"]).env("CLOCKBARRIER_THREADS", "zero").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pade_sweep_from_printed_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "{BASE}\n[pade]\ncoefficients = [6.4521, 1.6468, -0.4123, 0.2845, -0.1523, 0.0892]\nrhos = [-0.5, 0.0, 0.5]\n"
    );
    let cfg = write(dir.path(), "p.toml", &body);
    let (code, out, err) = run(&["pade", cfg.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let rows: Vec<Vec<String>> = out.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][1].parse::<f64>().unwrap(), 6.4521);
    assert_eq!(rows[1][6].parse::<f64>().unwrap(), 6.4521);
    let (code, out, _) = run(&["pade", "--poles", cfg.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.starts_with("approximant,re,im,distance_to_segment"));
    let bad = write(dir.path(), "q.toml", &body.replace("rhos = [-0.5, 0.0, 0.5]", "rhos = [1.5]"));
    assert_eq!(run(&["pade", bad.to_str().unwrap()]).0, 1);
}

#[test]
fn vanilla_reports_price_and_vol() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{BASE}\n[[vanillas]]\nmaturity = 0.5\nstrike = 100.0\nkind = \"call\"\nvalue = {{ vol = 0.4 }}\n");
    let cfg = write(dir.path(), "v.toml", &body);
    let (code, out, err) = run(&["vanilla", cfg.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let f: Vec<&str> = out.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(f[2], "call");
    let iv: f64 = f[4].parse().unwrap();
    assert!(iv > 0.3 && iv < 0.5);
}

#[test]
fn golden_table_has_published_layout() {
    let (code, out, err) = run(&["repro-table", "6.2", "--seed", "3"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("T,semi_analytic,mc,se,rel_err,"));
    assert_eq!(out.lines().count(), 3);
    for line in out.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        // Monte Carlo agrees with the analytic value of the same model.
        assert_eq!(f[9], "PASS", "{line}");
    }
}

#[test]
fn rho_expand_lists_orders() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{}\n[expansion]\norder = 2\ngrid = {{ nx = 60, ny = 24, nt = 40 }}\n", with_contract(DOC));
    let cfg = write(dir.path(), "r.toml", &body);
    let (code, out, err) = run(&["rho-expand", cfg.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let routes: Vec<&str> = out.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(routes, ["analytic-baseline", "forced-pde", "forced-pde"]);
}

#[test]
fn config_schema_round_trips() {
    let cfg = RunConfig::from_toml(&with_contract(DOC)).unwrap();
    assert_eq!(cfg.seed, 11);
    assert_eq!(cfg.contracts.len(), 1);
    let text = toml::to_string(&cfg).unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    for alias in ["sqou", "squared-ou"] {
        let t = format!("[clock]\nfamily = \"{alias}\"\nalpha = 0.6\nsigma = 0.49\ny0 = 0.42\n");
        assert!(RunConfig::from_toml(&t).unwrap().clock.is_some());
    }
}

#[test]
fn ten_significant_digits() {
    assert_eq!(sig10(17.045036214), "17.04503621");
    assert_eq!(sig10(0.0), "0");
    assert_eq!(sig10(-0.00123456789012), "-0.00123456789");
    assert_eq!(sig10(100.0), "100");
    assert_eq!(sig10(1.5e-9), "1.500000000e-9");
    let mut t = Table::new(&["a", "b", "c"]);
    t.push(row![1.0, "x,y", Option::<f64>::None]);
    assert_eq!(t.to_csv(), "a,b,c\n1,\"x,y\",\n");
}
