use std::io::Read;
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;
use std::time::Duration;

use wait_timeout::ChildExt;

pub const DEFAULT_COMMAND_TIMEOUT: Duration = Duration::from_secs(60);

/// Runs scheduler commands as child processes, with an optional argv prefix
/// and a hard timeout.
#[derive(Debug, Clone)]
pub struct CommandRunner {
    prefix: Vec<String>,
    timeout: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandOutput {
    /// `None` when the command was killed by a signal.
    pub code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
}

impl CommandOutput {
    pub fn success(&self) -> bool {
        self.code == Some(0)
    }
}

impl Default for CommandRunner {
    fn default() -> Self {
        CommandRunner::new(Vec::new(), DEFAULT_COMMAND_TIMEOUT)
    }
}

impl CommandRunner {
    pub fn new(prefix: Vec<String>, timeout: Duration) -> Self {
        CommandRunner { prefix, timeout }
    }

    pub fn prefix(&self) -> &[String] {
        &self.prefix
    }

    /// The argv actually executed for `argv`.
    pub fn full_argv(&self, argv: &[String]) -> Vec<String> {
        self.prefix.iter().chain(argv).cloned().collect()
    }

    /// Runs `argv`, feeding `stdin` from a file when given.
    ///
    /// `Err` means the command could not be run to completion (spawn failure
    /// or timeout); a non-zero exit is an `Ok` with the code.
    pub fn run(&self, argv: &[String], stdin: Option<&Path>) -> Result<CommandOutput, String> {
        let full = self.full_argv(argv);
        let (program, args) = full.split_first().ok_or("empty command line")?;
        let mut cmd = Command::new(program);
        cmd.args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        match stdin {
            Some(path) => {
                let file = std::fs::File::open(path)
                    .map_err(|e| format!("{}: {e}", path.display()))?;
                cmd.stdin(file);
            }
            None => {
                cmd.stdin(Stdio::null());
            }
        }
        log::debug!("running {full:?}");
        let mut child = cmd.spawn().map_err(|e| format!("{program}: {e}"))?;

        let mut out_pipe = child.stdout.take().expect("piped stdout");
        let mut err_pipe = child.stderr.take().expect("piped stderr");
        let out_reader = thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = out_pipe.read_to_end(&mut buf);
            buf
        });
        let err_reader = thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = err_pipe.read_to_end(&mut buf);
            buf
        });

        let status = match child.wait_timeout(self.timeout) {
            Ok(Some(status)) => status,
            Ok(None) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(format!(
                    "{program} timed out after {}s",
                    self.timeout.as_secs_f64()
                ));
            }
            Err(e) => return Err(format!("{program}: {e}")),
        };
        let stdout = out_reader.join().unwrap_or_default();
        let stderr = err_reader.join().unwrap_or_default();
        Ok(CommandOutput {
            code: status.code(),
            stdout: String::from_utf8_lossy(&stdout).into_owned(),
            stderr: String::from_utf8_lossy(&stderr).into_owned(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(a: &[&str]) -> Vec<String> {
        a.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn captures_output_and_code() {
        let r = CommandRunner::default();
        let out = r
            .run(&argv(&["sh", "-c", "echo out; echo err >&2; exit 3"]), None)
            .unwrap();
        assert_eq!(out.code, Some(3));
        assert_eq!(out.stdout, "out\n");
        assert_eq!(out.stderr, "err\n");
    }

    #[test]
    fn prefix_is_prepended() {
        let r = CommandRunner::new(argv(&["env", "X=1"]), DEFAULT_COMMAND_TIMEOUT);
        assert_eq!(r.full_argv(&argv(&["sh"])), ["env", "X=1", "sh"]);
        let out = r.run(&argv(&["sh", "-c", "echo $X"]), None).unwrap();
        assert_eq!(out.stdout, "1\n");
    }

    #[test]
    fn stdin_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("in");
        std::fs::write(&p, "hello").unwrap();
        let out = CommandRunner::default()
            .run(&argv(&["cat"]), Some(&p))
            .unwrap();
        assert_eq!(out.stdout, "hello");
    }

    #[test]
    fn timeout_and_missing_program() {
        let r = CommandRunner::new(Vec::new(), Duration::from_millis(100));
        assert!(r.run(&argv(&["sleep", "5"]), None).unwrap_err().contains("timed out"));
        assert!(r.run(&argv(&["/nonexistent/cmd"]), None).is_err());
    }
}
