fn main() {
    std::process::exit(corrupt_mfg::cli::run(std::env::args_os()));
}
