use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Resolves sibling `$ref`s against the shipped schema directory.
struct Siblings;

impl jsonschema::Retrieve for Siblings {
    fn retrieve(
        &self,
        uri: &jsonschema::Uri<String>,
    ) -> Result<Value, Box<dyn std::error::Error + Send + Sync>> {
        let file = uri.path().as_str().rsplit('/').next().unwrap_or_default().to_string();
        let text = std::fs::read_to_string(root().join("schemas").join(&file))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn validator(name: &str) -> jsonschema::Validator {
    jsonschema::options()
        .with_retriever(Siblings)
        .build(&read_json(&root().join("schemas").join(name)))
        .unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn check(schema: &str, doc: &Value) {
    let v = validator(schema);
    let errors: Vec<String> = v.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{schema}: {errors:#?}");
}

fn run(args: &[&str]) -> Value {
    serde_json::from_slice(&stdout(args)).unwrap()
}

fn stdout(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_etrace"))
        .args(args)
        .env_remove("ETRACE_PARAMS")
        .current_dir(root())
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

#[test]
fn reports_validate() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |f: &str| tmp.path().join(f).display().to_string();
    let (map, counts, trace) = (p("map.json"), p("counts.json"), p("trace.jsonl"));

    check("params.json", &run(&["params"]));
    stdout(&["compile", "benchmarks/call_heavy/prog.eir", "--emit", &map]);
    check("map.json", &read_json(Path::new(&map)));
    check(
        "sra.json",
        &run(&["sra", "benchmarks/matmult_2t/prog.eir", "--level", "both", "--bound", "max", "--bound", "min", "--idle", "1e-6"]),
    );
    check("profile.json", &run(&["profile", "benchmarks/nested_loops/prog.eir", "--args", "4,3", "--counts", &counts]));
    check("counts.json", &read_json(Path::new(&counts)));
    check("simulate.json", &run(&["simulate", "benchmarks/matmult_2t/prog.eir", "--args", "3", "--trace", &trace]));
    let slots = validator("trace.json");
    for line in std::fs::read_to_string(&trace).unwrap().lines() {
        assert!(slots.is_valid(&serde_json::from_str(line).unwrap()));
    }
    check("compare.json", &run(&["compare", "benchmarks/diamond", "benchmarks/phi_loop"]));
    check("explore.json", &run(&["explore", "--configs", "benchmarks/explore/matmult.json"]));
}

#[test]
fn shipped_files_validate() {
    let b = root().join("benchmarks");
    for f in ["matmult.json", "biquad.json"] {
        check("explore-config.json", &read_json(&b.join("explore").join(f)));
        check("explore.json", &read_json(&b.join("explore/expected").join(f)));
    }
    for entry in std::fs::read_dir(&b).unwrap() {
        let golden = entry.unwrap().path().join("expected/compare.json");
        if golden.is_file() {
            check("compare.json", &read_json(&golden));
        }
    }
}

#[test]
fn schemas_reject_unknown_fields() {
    let mut params = run(&["params"]);
    params["Pz"] = 1.0.into();
    assert!(!validator("params.json").is_valid(&params));
    let mut params = run(&["params"]);
    params["schema"] = 2.into();
    assert!(!validator("params.json").is_valid(&params));
    let mut sra = run(&["sra", "benchmarks/diamond/prog.eir"]);
    sra["config"]["threads"] = 0.into();
    assert!(!validator("sra.json").is_valid(&sra));
}
