#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use recall_probe::backends::mock::{MockBackend, MockScript};
use recall_probe::backends::{BackendProfile, ChatBackend};
use recall_probe::config::{load_config, LoadedConfig, Overrides};
use recall_probe::pipeline::{Command, Experiment};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e")
}

pub fn load_fixture(output_dir: &Path) -> LoadedConfig {
    let overrides = Overrides {
        output_dir: Some(output_dir.to_path_buf()),
        ..Default::default()
    };
    load_config(&fixture_dir().join("experiment.toml"), &overrides).expect("fixture config loads")
}

/// Builds scripted mocks for the fixture and keeps a handle to each one so a
/// test can read call counts after the fact.
pub struct ScriptedMocks {
    pub abort_after: Option<u64>,
    pub made: Mutex<Vec<Arc<MockBackend>>>,
}

impl ScriptedMocks {
    pub fn new(abort_after: Option<u64>) -> Arc<Self> {
        Arc::new(Self {
            abort_after,
            made: Mutex::new(Vec::new()),
        })
    }

    pub fn build(&self, _profile: &BackendProfile) -> Result<Arc<dyn ChatBackend>, String> {
        let script = MockScript::from_file(&fixture_dir().join("script.json"))?;
        let mut mock = MockBackend::from_script(script);
        if let Some(n) = self.abort_after {
            mock = mock.abort_after(n);
        }
        let mock = Arc::new(mock);
        self.made.lock().unwrap().push(mock.clone());
        Ok(mock)
    }

    pub fn calls(&self) -> u64 {
        self.made.lock().unwrap().iter().map(|m| m.calls()).sum()
    }
}

pub fn open_scripted(loaded: &LoadedConfig, mocks: &Arc<ScriptedMocks>) -> Experiment {
    let m = mocks.clone();
    let factory = move |p: &BackendProfile| m.build(p);
    Experiment::open(loaded, Some(&factory)).expect("experiment opens")
}

pub const COLLECT: [Command; 4] = [Command::Sample, Command::Grade, Command::Facts, Command::Verify];
pub const ANALYZE: [Command; 3] = [Command::Estimate, Command::Analyze, Command::Select];

pub fn run_all(exp: &Experiment, commands: &[Command]) {
    for &c in commands {
        let out = exp.run(c).unwrap_or_else(|e| panic!("{} failed: {e}", c.name()));
        assert_eq!(out.skipped, 0, "{} skipped items: {:?}", c.name(), out.notes);
    }
}

/// Reads every file under `root` whose path relative to `root` starts with one
/// of `prefixes`, sorted by path.
pub fn snapshot(root: &Path, prefixes: &[&str]) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
            if prefixes.iter().any(|p| rel.starts_with(p)) {
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}
