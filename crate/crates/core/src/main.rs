fn main() {
    std::process::exit(vnfmig::cli::run(std::env::args_os()));
}
