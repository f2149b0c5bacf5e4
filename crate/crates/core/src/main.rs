use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ADRC_LAB_LOG", "warn")).init();
    adrc_lab::cli::main_with_args(std::env::args_os())
}
