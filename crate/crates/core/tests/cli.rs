use std::fs;
use std::path::Path;
use std::process::Command;

const TINY: &str = "\
domain.R = 3.0
domain.resolution = 0.5
domain.surface_level = 1
basis.N = 8
time.T = 0.05
time.dt = 0.01
mode.positive_density = true
propulsion.family = \"swirl\"
initial.density = \"blob\"
initial.center = [1.8, 0.0, 0.0]
initial.radius = 0.5
";

fn rigidswim(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_rigidswim")).args(args).env("RUST_LOG", "error").output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("scenario.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn tiny() -> String {
    TINY.to_owned()
}

#[test]
fn run_writes_versioned_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let out = dir.path().join("out");
    let o = rigidswim(&["run", "--config", &cfg, "--out-dir", out.to_str().unwrap(), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for (file, header) in [
        ("trajectory.csv", "# rigidswim trajectory"),
        ("ledger.csv", "# rigidswim ledger"),
        ("diagnostics.csv", "# rigidswim diagnostics"),
        ("verification.csv", "# rigidswim verification v1"),
        ("density_final.vtk", "# vtk DataFile"),
    ] {
        let text = fs::read_to_string(out.join(file)).unwrap();
        assert!(text.starts_with(header), "{file}: {}", text.lines().next().unwrap_or(""));
    }
    let ledger = fs::read_to_string(out.join("ledger.csv")).unwrap();
    // header, column names, initial record and five steps
    assert_eq!(ledger.lines().filter(|l| !l.starts_with('#')).count(), 7);
}

#[test]
fn verify_exit_code_follows_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let o = rigidswim(&["verify", "--config", &cfg, "--out-dir", dir.path().to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    let failing = stdout
        .lines()
        .skip(2)
        .filter(|l| {
            let f: Vec<&str> = l.split(',').collect();
            f[3] == "false" && f[4] == "false"
        })
        .count();
    assert!(stdout.contains("weak_residual_relative"));
    assert_eq!(o.status.code(), Some(if failing == 0 { 0 } else { 1 }), "{stdout}");
}

#[test]
fn unknown_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{}fluid.viscosity = 2.0\n", tiny()));
    let o = rigidswim(&["run", "--config", &cfg, "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fluid.viscosity"));
}

#[test]
fn sweep_rejects_unordered_radii() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let o = rigidswim(&["sweep-domain", "--config", &cfg, "--out-dir", dir.path().to_str().unwrap(), "--radii", "4,3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn refinement_sweep_reports_each_pair() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let o = rigidswim(&["sweep-refine", "--config", &cfg, "--out-dir", dir.path().to_str().unwrap(), "--n", "6,8", "--dt", "0.01"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("refinement_sweep.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 3);
}
