fn main() {
    std::process::exit(elattn_cli::main_with_args(std::env::args_os()));
}
