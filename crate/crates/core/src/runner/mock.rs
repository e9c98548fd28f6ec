use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use super::{
    image_pin, BackendOutput, ContainerBackend, ImagePin, Invocation, RunnerError, CONTAINER_OUTPUT_DIR,
    RESULT_FILE,
};

/// Scripted container behaviour.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockBehavior {
    /// Copies the input to `<stem>.<extension>` and reports it as converted.
    Convert { extension: String, metadata: BTreeMap<String, String> },
    /// Emits metadata only.
    MetadataOnly { metadata: BTreeMap<String, String> },
    Fail { exit_code: i32, stderr: String },
    /// Exits 0 without writing result.json.
    NoResult,
    /// Writes a result.json that is not JSON.
    Malformed,
    /// Declares a converted file but never writes it.
    DeclareMissing,
    /// Writes an empty result document.
    Probe,
}

/// Deterministic in-process backend. Rules are matched in order by substring
/// of the image reference; the first match wins.
#[derive(Debug, Default)]
pub struct MockBackend {
    rules: Vec<(String, MockBehavior)>,
    invocations: Mutex<Vec<Invocation>>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rules used when the backend is selected by configuration: `probe`,
    /// `fail`, `metadata` and `convert` images, with the image tag reported
    /// as the tool version.
    pub fn standard() -> Self {
        MockBackend::new()
            .rule("probe", MockBehavior::Probe)
            .rule("fail", MockBehavior::Fail { exit_code: 1, stderr: "conversion failed".into() })
            .rule("metadata", MockBehavior::MetadataOnly { metadata: BTreeMap::new() })
            .rule("convert", MockBehavior::Convert { extension: "ome.tiff".into(), metadata: BTreeMap::new() })
    }

    pub fn rule(mut self, matcher: impl Into<String>, behavior: MockBehavior) -> Self {
        self.rules.push((matcher.into(), behavior));
        self
    }

    pub fn invocations(&self) -> Vec<Invocation> {
        self.invocations.lock().expect("mock lock").clone()
    }

    fn behavior_for(&self, image: &str) -> Option<&MockBehavior> {
        self.rules.iter().find(|(m, _)| image.contains(m.as_str())).map(|(_, b)| b)
    }
}

fn with_version(image: &str, key: &str, metadata: &BTreeMap<String, String>) -> BTreeMap<String, String> {
    let mut out = metadata.clone();
    if out.is_empty() {
        if let ImagePin::Tag(tag) = image_pin(image) {
            out.insert(key.to_string(), tag.to_string());
        }
    }
    out
}

fn write_result(out_dir: &Path, doc: serde_json::Value) -> Result<(), RunnerError> {
    fs::write(out_dir.join(RESULT_FILE), serde_json::to_vec_pretty(&doc).expect("json"))?;
    Ok(())
}

impl ContainerBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn invoke(&self, inv: &Invocation) -> Result<BackendOutput, RunnerError> {
        self.invocations.lock().expect("mock lock").push(inv.clone());
        let behavior = self
            .behavior_for(&inv.image)
            .ok_or_else(|| RunnerError::Backend(format!("image {} not found", inv.image)))?;
        let input = inv
            .arg_value("--inputfile")
            .and_then(|p| inv.host_path(p))
            .ok_or_else(|| RunnerError::Backend("missing --inputfile".into()))?;
        let out_dir = inv
            .arg_value("--outputfolder")
            .filter(|p| *p == CONTAINER_OUTPUT_DIR)
            .and_then(|p| inv.host_path(p))
            .ok_or_else(|| RunnerError::Backend("missing --outputfolder".into()))?;
        let input_name = input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();

        match behavior {
            MockBehavior::Convert { extension, metadata } => {
                let stem = input_name.split('.').next().unwrap_or(&input_name);
                let converted = format!("{stem}.{extension}");
                fs::copy(&input, out_dir.join(&converted))?;
                let metadata = with_version(&inv.image, "converter_version", metadata);
                write_result(&out_dir, serde_json::json!({ "converted_file": converted, "metadata": metadata }))?;
                Ok(BackendOutput { exit_code: 0, stdout: format!("converted {input_name} -> {converted}\n"), stderr: String::new() })
            }
            MockBehavior::MetadataOnly { metadata } => {
                let metadata = with_version(&inv.image, "extractor_version", metadata);
                write_result(&out_dir, serde_json::json!({ "metadata": metadata }))?;
                Ok(BackendOutput { exit_code: 0, stdout: format!("read metadata of {input_name}\n"), stderr: String::new() })
            }
            MockBehavior::Fail { exit_code, stderr } => Ok(BackendOutput {
                exit_code: *exit_code,
                stdout: format!("processing {input_name}\n"),
                stderr: stderr.clone(),
            }),
            MockBehavior::NoResult => Ok(BackendOutput::default()),
            MockBehavior::Malformed => {
                fs::write(out_dir.join(RESULT_FILE), b"{ not json")?;
                Ok(BackendOutput::default())
            }
            MockBehavior::DeclareMissing => {
                write_result(&out_dir, serde_json::json!({ "converted_file": "ghost.ome.tiff" }))?;
                Ok(BackendOutput::default())
            }
            MockBehavior::Probe => {
                write_result(&out_dir, serde_json::json!({}))?;
                Ok(BackendOutput { exit_code: 0, stdout: "probe ok\n".into(), stderr: String::new() })
            }
        }
    }
}
