fn main() {
    std::process::exit(slc_cli::main_with_args(std::env::args_os()));
}
