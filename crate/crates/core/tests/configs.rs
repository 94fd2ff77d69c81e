use std::path::Path;

use attrib_core::config::{ExperimentConfigFile, MllmConfigFile};

fn templates() -> Vec<std::path::PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut v: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|e| e == "toml")).collect();
    v.sort();
    v
}

#[test]
fn every_template_parses_and_validates() {
    let all = templates();
    assert!(all.len() >= 7);
    for path in all {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name.starts_with("mllm") {
            MllmConfigFile::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
        } else {
            let cfg = ExperimentConfigFile::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(cfg.train.epochs, 200, "{name} keeps full-fidelity epochs");
            assert_eq!(format!("{}.toml", cfg.kind.as_str()), name);
        }
    }
}
