//! Bundled scenarios against their golden outputs.
//!
//! Set `SPINLOC_REGENERATE_GOLDEN=1` to rewrite the golden files.

use std::fs;
use std::path::{Path, PathBuf};

use spinloc::scenario::{run, Scenario};

fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn bundled() -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = fs::read_dir(scenario_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    files.sort();
    files
}

#[test]
fn bundled_scenarios_match_golden() {
    let regenerate = std::env::var("SPINLOC_REGENERATE_GOLDEN").is_ok_and(|v| v == "1");
    let golden = scenario_dir().join("golden");
    let files = bundled();
    assert!(files.len() >= 10, "found {} scenarios", files.len());
    let mut mismatches = Vec::new();
    for file in files {
        let scenario = Scenario::load(&file).unwrap_or_else(|e| panic!("{}: {e}", file.display()));
        let out = run(&scenario).unwrap_or_else(|e| panic!("{}: {e}", file.display()));
        let stem = file.file_stem().unwrap().to_string_lossy().into_owned();
        assert_eq!(stem, scenario.name, "file name and scenario name differ");
        for (ext, text) in [("csv", out.csv_string().unwrap()), ("json", out.summary_json())] {
            let path = golden.join(format!("{stem}.{ext}"));
            if regenerate {
                fs::write(&path, &text).unwrap();
            } else {
                let expected = fs::read_to_string(&path)
                    .unwrap_or_else(|e| panic!("{}: {e}; regenerate the golden files", path.display()));
                if expected != text {
                    mismatches.push(path.display().to_string());
                }
            }
        }
    }
    assert!(mismatches.is_empty(), "outputs differ from golden: {mismatches:?}");
}

#[test]
fn rerun_is_byte_identical() {
    let file = scenario_dir().join("fig3-pulsepol.toml");
    let scenario = Scenario::load(&file).unwrap();
    let a = run(&scenario).unwrap();
    let b = run(&scenario).unwrap();
    assert_eq!(a.csv_string().unwrap(), b.csv_string().unwrap());
    assert_eq!(a.summary_json(), b.summary_json());
}
