fn main() {
    std::process::exit(dualvdt::cli::run(std::env::args_os()));
}
