//! Simulated batch scheduler. See the `psij-mock-lrm` crate for the command
//! set and environment variables.

use std::io::Write;

fn main() {
    let out = match psij_mock_lrm::Settings::from_env() {
        Ok(settings) => {
            let argv: Vec<String> = std::env::args().collect();
            psij_mock_lrm::dispatch_argv(settings, &argv, &mut std::io::stdin().lock())
        }
        Err(e) => psij_mock_lrm::Output {
            code: 2,
            stdout: String::new(),
            stderr: format!("mock-lrm: {e}\n"),
        },
    };
    let _ = std::io::stdout().write_all(out.stdout.as_bytes());
    let _ = std::io::stderr().write_all(out.stderr.as_bytes());
    std::process::exit(out.code);
}
