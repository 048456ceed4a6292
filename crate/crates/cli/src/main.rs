use std::io::{self, Write};
use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let code = speedlab::run_system(std::env::args_os(), &mut out);
    let _ = out.flush();
    ExitCode::from(code as u8)
}
