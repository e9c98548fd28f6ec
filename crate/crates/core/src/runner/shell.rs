use std::io::Read;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use super::{BackendOutput, ContainerBackend, Invocation, RunnerError};

/// Default engine command line.
pub const DEFAULT_TEMPLATE: &str =
    "podman run --rm -v {input_dir}:/data/in:ro -v {output_dir}:/data/out {image} {args}";

/// Runs containers through an external engine command line.
///
/// The template is split shell-style; the placeholders `{image}`,
/// `{input_dir}` and `{output_dir}` are substituted inside tokens and a token
/// that is exactly `{args}` expands to the canonical argument list.
#[derive(Debug, Clone)]
pub struct ShellBackend {
    template: Vec<String>,
}

impl ShellBackend {
    pub fn new(template: &str) -> Result<Self, RunnerError> {
        let tokens = shlex::split(template)
            .filter(|t| !t.is_empty())
            .ok_or_else(|| RunnerError::Backend(format!("cannot parse template {template:?}")))?;
        Ok(ShellBackend { template: tokens })
    }

    pub fn command_line(&self, inv: &Invocation) -> Vec<String> {
        let mut out = Vec::new();
        for token in &self.template {
            if token == "{args}" {
                out.extend(inv.args.iter().cloned());
                continue;
            }
            out.push(
                token
                    .replace("{image}", &inv.image)
                    .replace("{input_dir}", &inv.input_dir.to_string_lossy())
                    .replace("{output_dir}", &inv.output_dir.to_string_lossy()),
            );
        }
        out
    }
}

impl Default for ShellBackend {
    fn default() -> Self {
        ShellBackend::new(DEFAULT_TEMPLATE).expect("default template parses")
    }
}

fn drain<R: Read + Send + 'static>(reader: Option<R>) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut r) = reader {
            let _ = r.read_to_end(&mut buf);
        }
        String::from_utf8_lossy(&buf).into_owned()
    })
}

impl ContainerBackend for ShellBackend {
    fn name(&self) -> &str {
        "shell"
    }

    fn invoke(&self, inv: &Invocation) -> Result<BackendOutput, RunnerError> {
        let argv = self.command_line(inv);
        let (program, rest) = argv.split_first().ok_or_else(|| RunnerError::Backend("empty template".into()))?;
        let mut child = Command::new(program)
            .args(rest)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|err| RunnerError::Backend(format!("cannot start {program}: {err}")))?;
        let stdout = drain(child.stdout.take());
        let stderr = drain(child.stderr.take());

        let started = Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if started.elapsed() >= inv.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(RunnerError::Timeout(inv.timeout));
            }
            thread::sleep(Duration::from_millis(10));
        };
        Ok(BackendOutput {
            exit_code: status.code().unwrap_or(-1),
            stdout: stdout.join().unwrap_or_default(),
            stderr: stderr.join().unwrap_or_default(),
        })
    }
}
