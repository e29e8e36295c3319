fn main() -> std::process::ExitCode {
    dualkd::cli::main_with_args(std::env::args_os())
}
