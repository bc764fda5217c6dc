fn main() {
    std::process::exit(spss_core::cli::run_from_args(std::env::args_os()));
}
