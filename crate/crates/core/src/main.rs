fn main() {
    std::process::exit(ccreid_core::cli::run(std::env::args_os()));
}
