fn main() {
    std::process::exit(patchreg::cli::run(std::env::args_os()));
}
