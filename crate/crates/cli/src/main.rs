use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(wsod_cli::LOG_ENV, "warn")).init();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = wsod_cli::run(std::env::args_os(), &mut out);
    let _ = out.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string();
            // clap renders its own `error:` prefix
            if msg.starts_with("error:") {
                eprintln!("{}", msg.trim_end());
            } else {
                eprintln!("error: {msg}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
