//! Python bindings. Structured values cross the boundary as plain dicts and
//! lists built through the `json` module.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use recall_probe::analysis::{self, AuditedSample, WithinQuestionPoint};
use recall_probe::config::{load_config, LoadedConfig, Overrides};
use recall_probe::estimators::{self, PassCurve};
use recall_probe::factpipe::{self, AuditLabel};
use recall_probe::interventions::{self, DUMMY_UNIT, NO_FACTS_UNIT};
use recall_probe::pipeline::{self, Command, Experiment};
use recall_probe::{GradeLabel, TraceRef, VariantId, Verdict};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

/// Unbiased pass@k for `c` correct answers among `n` samples.
#[pyfunction]
fn pass_at_k(n: u64, c: u64, k: u64) -> PyResult<f64> {
    estimators::pass_at_k(n, c, k).map_err(value_err)
}

/// Mean pass@k over questions for k = 1..=n_max, from `(n, c)` pairs.
#[pyfunction]
fn pass_curve(counts: Vec<(u64, u64)>, n_max: usize) -> PyResult<Vec<f64>> {
    Ok(estimators::pass_curve(&counts, n_max).map_err(value_err)?.values)
}

/// Ω of an ON curve against an OFF curve, as a dict.
#[pyfunction]
fn omega<'py>(py: Python<'py>, curve_on: Vec<f64>, curve_off: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    let r = estimators::omega(&PassCurve::new(curve_on), &PassCurve::new(curve_off)).map_err(value_err)?;
    to_py(py, &r)
}

#[pyfunction]
#[pyo3(signature = (counts_on, counts_off, n_max, resamples = 1000, level = 0.95, seed = 0))]
fn bootstrap_ci(
    counts_on: Vec<(u64, u64)>,
    counts_off: Vec<(u64, u64)>,
    n_max: usize,
    resamples: usize,
    level: f64,
    seed: u64,
) -> PyResult<(f64, f64)> {
    estimators::bootstrap_ci(&counts_on, &counts_off, n_max, resamples, level, seed).map_err(value_err)
}

#[pyfunction]
fn estimate_tokens(text: &str) -> u32 {
    recall_probe::tokens::estimate_tokens(text)
}

/// Space-joined repetitions of `unit` closest to `target_tokens`.
#[pyfunction]
#[pyo3(signature = (target_tokens, unit = DUMMY_UNIT))]
fn build_dummy_trace(target_tokens: u32, unit: &str) -> PyResult<String> {
    interventions::build_dummy_trace(target_tokens, unit).map_err(value_err)
}

/// Label for a trace from its fact verdicts ("Correct", "Incorrect",
/// "Unknown", "Illegal").
#[pyfunction]
#[pyo3(signature = (verdicts, had_facts = None))]
fn audit_label(py: Python<'_>, verdicts: Bound<'_, PyAny>, had_facts: Option<bool>) -> PyResult<String> {
    let verdicts: Vec<Verdict> = from_py(&verdicts)?;
    let label = factpipe::audit_label(&verdicts, had_facts.unwrap_or(!verdicts.is_empty()));
    to_py(py, &label)?.extract()
}

#[derive(Deserialize)]
struct SampleIn {
    question_id: String,
    label: AuditLabel,
    correct: bool,
    #[serde(default)]
    has_facts: Option<bool>,
}

fn audited(samples: &Bound<'_, PyAny>) -> PyResult<Vec<AuditedSample>> {
    let rows: Vec<SampleIn> = from_py(samples)?;
    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| AuditedSample {
            trace: TraceRef {
                question_id: r.question_id,
                variant: VariantId::On,
                sample_index: i as u32,
            },
            has_facts: r.has_facts.unwrap_or(r.label != AuditLabel::ExcludedNoFacts),
            label: r.label,
            grade: if r.correct { GradeLabel::Correct } else { GradeLabel::Incorrect },
        })
        .collect())
}

/// Selection-strategy simulation over dicts with keys `question_id`,
/// `label`, `correct` and optionally `has_facts`.
#[pyfunction]
fn selection_simulation<'py>(py: Python<'py>, samples: Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let report = analysis::selection_simulation(&audited(&samples)?).map_err(value_err)?;
    to_py(py, &report)
}

/// Per-question clean and hallucinated correct rates, same input shape as
/// `selection_simulation`.
#[pyfunction]
#[pyo3(signature = (samples, min_per_subset = analysis::DEFAULT_MIN_PER_SUBSET))]
fn within_question_points<'py>(
    py: Python<'py>,
    samples: Bound<'py, PyAny>,
    min_per_subset: u64,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &analysis::within_question_points(&audited(&samples)?, min_per_subset))
}

/// OLS slope and intercept of y on x.
#[pyfunction]
fn regression_slope(points: Vec<(f64, f64)>) -> PyResult<(f64, f64)> {
    let points: Vec<WithinQuestionPoint> = points
        .into_iter()
        .enumerate()
        .map(|(i, (x, y))| WithinQuestionPoint {
            question_id: i.to_string(),
            clean_rate: x,
            hallucinated_rate: y,
            n_clean: 0,
            n_hallucinated: 0,
        })
        .collect();
    let fit = analysis::regression_slope(&points).map_err(value_err)?;
    Ok((fit.slope, fit.intercept))
}

fn parse_command(name: &str) -> PyResult<Command> {
    Ok(match name {
        "sample" => Command::Sample,
        "grade" => Command::Grade,
        "facts" => Command::Facts,
        "verify" => Command::Verify,
        "estimate" => Command::Estimate,
        "analyze" => Command::Analyze,
        "select" => Command::Select,
        "report" => Command::Report,
        "replay" => Command::Replay,
        other => return Err(PyValueError::new_err(format!("unknown command {other:?}"))),
    })
}

/// An experiment opened from a config file. Mock profiles run offline; HTTP
/// profiles read credentials from the environment.
#[pyclass(unsendable)]
struct Run {
    loaded: LoadedConfig,
    experiment: Experiment,
}

#[pymethods]
impl Run {
    #[new]
    #[pyo3(signature = (config_path, output_dir = None, run_id = None, n_samples = None))]
    fn new(
        config_path: PathBuf,
        output_dir: Option<PathBuf>,
        run_id: Option<String>,
        n_samples: Option<u32>,
    ) -> PyResult<Self> {
        let overrides = Overrides {
            output_dir,
            run_id,
            n_samples,
            ..Default::default()
        };
        let loaded = load_config(&config_path, &overrides).map_err(value_err)?;
        let experiment = Experiment::open(&loaded, Some(&pipeline::default_backend)).map_err(runtime_err)?;
        Ok(Self { loaded, experiment })
    }

    #[getter]
    fn run_dir(&self) -> PathBuf {
        self.loaded.config.run_dir()
    }

    #[getter]
    fn backend_calls(&self) -> u64 {
        self.experiment.backend_calls()
    }

    /// Runs one command and returns its outcome as a dict.
    fn run<'py>(&self, py: Python<'py>, command: &str) -> PyResult<Bound<'py, PyAny>> {
        let outcome = self.experiment.run(parse_command(command)?).map_err(runtime_err)?;
        to_py(py, &outcome)
    }

    /// Call plan for a command without running it.
    fn plan(&self, command: &str) -> PyResult<Vec<String>> {
        let plan = pipeline::open_for_plan(&self.loaded).map_err(runtime_err)?;
        plan.plan(parse_command(command)?).map_err(runtime_err)
    }

    fn questions<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.experiment.questions())
    }

    fn samples<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.experiment.store().all_samples())
    }

    fn audits<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.experiment.store().all_audits())
    }

    fn estimate_summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.experiment.estimate_summary().map_err(runtime_err)?)
    }

    fn analysis_summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.experiment.analysis_summary().map_err(runtime_err)?)
    }

    fn selection_report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.experiment.selection_report().map_err(runtime_err)?)
    }
}

#[pymodule(name = "recall_probe")]
fn recall_probe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DUMMY_UNIT", DUMMY_UNIT)?;
    m.add("NO_FACTS_UNIT", NO_FACTS_UNIT)?;
    m.add_function(wrap_pyfunction!(pass_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(pass_curve, m)?)?;
    m.add_function(wrap_pyfunction!(omega, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_ci, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(build_dummy_trace, m)?)?;
    m.add_function(wrap_pyfunction!(audit_label, m)?)?;
    m.add_function(wrap_pyfunction!(selection_simulation, m)?)?;
    m.add_function(wrap_pyfunction!(within_question_points, m)?)?;
    m.add_function(wrap_pyfunction!(regression_slope, m)?)?;
    m.add_class::<Run>()?;
    Ok(())
}
