use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use transactive_ffi::*;

const PAIR_PROFILES: &str = "agent_id,slot,load_kw,renewable_kw,outdoor_temp_c\n0,0,0,1,23\n1,0,2,0,23\n";

const PAIR_SCENARIO: &str = r#"
[horizon]
slots = 1

[tariff]
a_g = 0.1
b_g = 0.0

[defaults.hvac]
beta_ac = 0.0

[defaults.flex]
p_max = 0.0
p_ref = 0.0
beta_f = 0.0

[profiles]
path = "profiles.csv"

[consensus]
epsilon = 0.05
"#;

struct Pair {
    _dir: tempfile::TempDir,
    scenario: *mut TxScenario,
}

impl Drop for Pair {
    fn drop(&mut self) {
        unsafe { tx_scenario_free(self.scenario) };
    }
}

fn pair() -> Pair {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("profiles.csv"), PAIR_PROFILES).unwrap();
    let path = dir.path().join("scenario.toml");
    std::fs::write(&path, PAIR_SCENARIO).unwrap();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut scenario = ptr::null_mut();
    let status = unsafe { tx_scenario_load(c_path.as_ptr(), &mut scenario) };
    assert_eq!(status, TxStatus::Ok, "{}", last_error());
    Pair { _dir: dir, scenario }
}

fn last_error() -> String {
    let p = tx_last_error();
    if p.is_null() {
        String::new()
    } else {
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }
}

#[test]
fn two_agent_market_clears_at_hand_solved_price() {
    let p = pair();
    unsafe {
        assert_eq!(tx_scenario_agents(p.scenario), 2);
        assert_eq!(tx_scenario_slots(p.scenario), 1);
        let mut result = ptr::null_mut();
        assert_eq!(tx_run_coordinated(p.scenario, &mut result), TxStatus::Ok, "{}", last_error());
        assert_eq!(tx_result_converged(result), 1);
        assert!(tx_result_rounds(result) > 0);
        assert!(tx_result_clearing_residual(result) <= 1e-3);
        let (mut price, mut buy, mut sell, mut c0, mut c1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(tx_result_price(result, 0, &mut price), TxStatus::Ok);
        assert_eq!(tx_result_trade(result, 0, 0, &mut sell), TxStatus::Ok);
        assert_eq!(tx_result_trade(result, 1, 0, &mut buy), TxStatus::Ok);
        assert_eq!(tx_result_cost(result, 0, &mut c0), TxStatus::Ok);
        assert_eq!(tx_result_cost(result, 1, &mut c1), TxStatus::Ok);
        assert!((price - 0.2).abs() < 1e-3, "price {price}");
        assert!((buy - 1.0).abs() < 1e-3 && (sell + 1.0).abs() < 1e-3, "trades {buy} {sell}");
        assert!((c0 + c1 - 0.1).abs() < 1e-4, "costs {c0} {c1}");
        tx_result_free(result);
    }
}

#[test]
fn standalone_buyer_pays_for_all_grid_power() {
    let p = pair();
    unsafe {
        let mut result = ptr::null_mut();
        assert_eq!(tx_run_standalone(p.scenario, &mut result), TxStatus::Ok);
        let (mut c1, mut g1, mut price) = (0.0, 0.0, 0.0);
        assert_eq!(tx_result_cost(result, 1, &mut c1), TxStatus::Ok);
        assert_eq!(tx_result_grid(result, 1, 0, &mut g1), TxStatus::Ok);
        assert!((c1 - 0.4).abs() < 1e-6 && (g1 - 2.0).abs() < 1e-6);
        assert_eq!(tx_result_price(result, 0, &mut price), TxStatus::OutOfRange);
        assert_eq!(tx_result_converged(result), 1);
        tx_result_free(result);
    }
}

#[test]
fn round_limit_still_returns_result() {
    let p = pair();
    unsafe {
        assert_eq!(tx_scenario_set_max_rounds(p.scenario, 1), TxStatus::Ok);
        let mut result = ptr::null_mut();
        assert_eq!(tx_run_coordinated(p.scenario, &mut result), TxStatus::NotConverged);
        assert!(!result.is_null());
        assert_eq!(tx_result_rounds(result), 1);
        assert_eq!(tx_result_converged(result), 0);
        assert!(last_error().contains("1 rounds"));
        tx_result_free(result);
    }
}

#[test]
fn bad_arguments_are_reported() {
    let p = pair();
    unsafe {
        let mut result = ptr::null_mut();
        assert_eq!(tx_run_coordinated(ptr::null(), &mut result), TxStatus::NullArgument);
        assert!(!last_error().is_empty());
        assert_eq!(tx_run_standalone(p.scenario, ptr::null_mut()), TxStatus::NullArgument);
        assert_eq!(tx_scenario_set_epsilon(p.scenario, -1.0), TxStatus::Config);
        assert_eq!(tx_scenario_set_max_rounds(p.scenario, 0), TxStatus::Config);
        assert_eq!(tx_scenario_agents(ptr::null()), 0);
        assert!(tx_result_clearing_residual(ptr::null()).is_nan());

        assert_eq!(tx_run_standalone(p.scenario, &mut result), TxStatus::Ok);
        assert!(last_error().is_empty());
        let mut v = 0.0;
        assert_eq!(tx_result_cost(result, 2, &mut v), TxStatus::OutOfRange);
        assert_eq!(tx_result_trade(result, 0, 1, &mut v), TxStatus::OutOfRange);
        assert_eq!(tx_result_cost(result, 0, ptr::null_mut()), TxStatus::NullArgument);
        tx_result_free(result);
        tx_result_free(ptr::null_mut());
        tx_scenario_free(ptr::null_mut());
    }
}

#[test]
fn scenario_errors_map_to_status() {
    unsafe {
        let mut s = ptr::null_mut();
        let missing = CString::new("/nonexistent/scenario.toml").unwrap();
        assert_eq!(tx_scenario_load(missing.as_ptr(), &mut s), TxStatus::Io);
        assert!(last_error().contains("nonexistent"));

        let bad = CString::new("[horizon]\nslots = \"many\"\n").unwrap();
        assert_eq!(tx_scenario_from_toml(bad.as_ptr(), ptr::null(), &mut s), TxStatus::Config);
        assert!(s.is_null());

        let invalid = [0xffu8, 0xfe, 0];
        let text = invalid.as_ptr().cast();
        assert_eq!(tx_scenario_from_toml(text, ptr::null(), &mut s), TxStatus::InvalidUtf8);
    }
}

#[test]
fn synthetic_scenario_from_text() {
    let text = CString::new("seed = 3\n[horizon]\nslots = 4\n[synthetic]\nagents = 3\n").unwrap();
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(tx_scenario_from_toml(text.as_ptr(), ptr::null(), &mut s), TxStatus::Ok, "{}", last_error());
        assert_eq!(tx_scenario_agents(s), 3);
        assert_eq!(tx_scenario_slots(s), 4);
        tx_scenario_free(s);
    }
}

#[test]
fn infeasible_agent_is_named() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("profiles.csv"), "agent_id,slot,load_kw,renewable_kw,outdoor_temp_c\n7,0,50,0,23\n8,0,1,0,23\n").unwrap();
    let text = CString::new(format!("{PAIR_SCENARIO}\n[defaults]\ngrid_cap = 5.0\n")).unwrap();
    let base = CString::new(dir.path().to_str().unwrap()).unwrap();
    unsafe {
        let mut s = ptr::null_mut();
        let status = tx_scenario_from_toml(text.as_ptr(), base.as_ptr(), &mut s);
        assert_eq!(status, TxStatus::Ok, "{}", last_error());
        let mut result = ptr::null_mut();
        assert_eq!(tx_run_standalone(s, &mut result), TxStatus::Infeasible);
        assert!(result.is_null());
        assert!(last_error().contains("agent 7"), "{}", last_error());
        tx_scenario_free(s);
    }
}

#[test]
fn spectral_gaps() {
    let mut gap = 0.0;
    let complete = CString::new("complete").unwrap();
    let star = CString::new("star:0").unwrap();
    let bogus = CString::new("mesh").unwrap();
    unsafe {
        assert_eq!(tx_spectral_gap(complete.as_ptr(), 10, &mut gap), TxStatus::Ok);
        assert!((gap - 1.0).abs() < 1e-9);
        assert_eq!(tx_spectral_gap(star.as_ptr(), 10, &mut gap), TxStatus::Ok);
        assert!(gap > 0.0 && gap < 1.0);
        assert_eq!(tx_spectral_gap(bogus.as_ptr(), 10, &mut gap), TxStatus::Config);
        assert_eq!(tx_spectral_gap(complete.as_ptr(), 1, &mut gap), TxStatus::Config);
    }
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(tx_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/transactive.h");
    let text = std::fs::read_to_string(&header).unwrap();
    let exports = [
        "tx_scenario_load",
        "tx_scenario_from_toml",
        "tx_scenario_free",
        "tx_scenario_agents",
        "tx_scenario_slots",
        "tx_scenario_set_epsilon",
        "tx_scenario_set_max_rounds",
        "tx_run_standalone",
        "tx_run_coordinated",
        "tx_result_free",
        "tx_result_converged",
        "tx_result_rounds",
        "tx_result_clearing_residual",
        "tx_result_cost",
        "tx_result_trade",
        "tx_result_grid",
        "tx_result_price",
        "tx_spectral_gap",
        "tx_last_error",
        "tx_version",
    ];
    for name in exports {
        assert!(text.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(text.contains("typedef struct TxScenario TxScenario;"));
    assert!(text.contains("TX_STATUS_NOT_CONVERGED = 5"));

    let dir = tempfile::tempdir().unwrap();
    let source = dir.path().join("use.c");
    std::fs::write(
        &source,
        "#include \"transactive.h\"\nint main(void) {\n  TxScenario *s = 0;\n  TxStatus st = tx_scenario_load(\"x\", &s);\n  tx_scenario_free(s);\n  return st == TX_STATUS_OK ? 0 : 1;\n}\n",
    )
    .unwrap();
    let Ok(out) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&source)
        .output()
    else {
        eprintln!("no C compiler found; syntax check skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
