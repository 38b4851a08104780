use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    let env_layout = std::env::var_os(detrap_cli::LAYOUT_ENV).map(Into::into);
    let out = detrap_cli::run(std::env::args_os(), env_layout);
    // A closed pipe is not worth a panic.
    let _ = std::io::stdout().write_all(out.stdout.as_bytes());
    let _ = std::io::stderr().write_all(out.stderr.as_bytes());
    ExitCode::from(out.code as u8)
}
