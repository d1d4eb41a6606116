fn main() {
    std::process::exit(lifshitz_cli::runner::main_with_args(std::env::args_os()));
}
